use crate::error::{Error, Result};

/// Probabilities are floored here before renormalising.
pub const PROB_FLOOR: f64 = 1e-10;

fn floored(p: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = p.iter().map(|&v| v.max(PROB_FLOOR)).collect();
    let z: f64 = q.iter().sum();
    q.into_iter().map(|v| v / z).collect()
}

/// `KL(p ‖ q)` after flooring and renormalising both.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Protocol(format!(
            "distributions have {} and {} classes",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input("probabilities must be finite and non-negative".into()));
    }
    let (p, q) = (floored(p), floored(q));
    // Each term p·ln(p/q) ≥ p − q, so clamping at zero only removes rounding.
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// Mean over paired samples of `KL(reference ‖ generated)`.
pub fn kld_metric(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(Error::Protocol(format!(
            "{} generated vs {} reference distributions",
            generated.len(),
            reference.len()
        )));
    }
    let total = reference
        .iter()
        .zip(generated)
        .map(|(r, g)| kl_divergence(r, g))
        .sum::<Result<f64>>()?;
    Ok(total / generated.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_lists_give_zero() {
        let d = vec![vec![0.2, 0.3, 0.5], vec![1.0, 0.0, 0.0]];
        assert_eq!(kld_metric(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn point_mass_against_uniform_is_log_two() {
        let k = kld_metric(&[vec![0.5, 0.5]], &[vec![1.0, 0.0]]).unwrap();
        // Flooring turns (1, 0) into (1, ε)/(1 + ε).
        let p = [1.0 / (1.0 + PROB_FLOOR), PROB_FLOOR / (1.0 + PROB_FLOOR)];
        let oracle = p[0] * (p[0] / 0.5).ln() + p[1] * (p[1] / 0.5).ln();
        assert!((k - oracle).abs() < 1e-15);
        assert!((k - 2f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn length_mismatch_is_a_protocol_error() {
        assert!(matches!(kld_metric(&[vec![1.0]], &[]), Err(Error::Protocol(_))));
        assert!(matches!(
            kld_metric(&[vec![1.0]], &[vec![0.5, 0.5]]),
            Err(Error::Protocol(_))
        ));
    }
}
