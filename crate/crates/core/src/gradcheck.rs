//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` for each input.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
}

/// Compare the gradient of the scalar built by `f` against central
/// differences with step `h`, for every input tensor.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut values = inputs.to_vec();
    for (i, (&v, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(v, input.shape());
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + h;
            let plus = eval(&values);
            values[i].data_mut()[j] = orig - h;
            let minus = eval(&values);
            values[i].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        rel_errors.push(relative_error(analytic.data(), &numeric));
    }
    let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
    GradCheckReport {
        rel_errors,
        max_rel_error,
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
