use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `D×D`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        (&m + m.transpose()) * 0.5
    }
}

/// Sample mean and unbiased covariance of `samples[N, D]`; needs `N ≥ D+1`.
pub fn fit_gaussian(samples: &Tensor) -> Result<GaussianStats> {
    if samples.ndim() != 2 {
        return Err(Error::Input(format!("samples must be N×D, got {:?}", samples.shape())));
    }
    let (n, d) = (samples.shape()[0], samples.shape()[1]);
    if n < d + 1 {
        return Err(Error::Input(format!(
            "{n} samples cannot fit a {d}-dimensional covariance"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = samples.row(i);
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(GaussianStats { mean, cov })
}

/// Eigen-decomposition of a symmetric matrix; eigenvalues below
/// `-1e-8·max(1, λ_max)` are rejected with the given error, smaller
/// negatives are clamped to zero.
fn psd_eigen(m: DMatrix<f64>, err: impl Fn(f64) -> Error) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(m);
    let top = e.eigenvalues.iter().cloned().fold(1.0, f64::max);
    for l in e.eigenvalues.iter_mut() {
        if *l < -1e-8 * top {
            return Err(err(*l));
        }
        *l = l.max(0.0);
    }
    Ok(e)
}

/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`. The trace of the square root is
/// taken from the eigenvalues of the symmetric `√Σ1·Σ2·√Σ1`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(Error::Input("Gaussian statistics differ in dimension".into()));
    }
    if a.mean
        .iter()
        .chain(&a.cov)
        .chain(&b.mean)
        .chain(&b.cov)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Input("Gaussian statistics hold non-finite values".into()));
    }
    let (s1, s2) = (a.cov_matrix(), b.cov_matrix());
    for (s, raw) in [(&s1, &a.cov), (&s2, &b.cov)] {
        let asym = (0..d * d)
            .map(|k| (raw[k] - s[(k / d, k % d)]).abs())
            .fold(0.0, f64::max);
        let scale = s.iter().map(|v| v.abs()).fold(1.0, f64::max);
        if asym > 1e-8 * scale {
            return Err(Error::Input(format!(
                "covariance is not symmetric (deviation {asym:e})"
            )));
        }
    }
    let e1 = psd_eigen(s1.clone(), |l| Error::Input(format!("covariance has eigenvalue {l:e}")))?;
    psd_eigen(s2.clone(), |l| Error::Input(format!("covariance has eigenvalue {l:e}")))?;
    let root = DVector::from_iterator(d, e1.eigenvalues.iter().map(|l| l.sqrt()));
    let sqrt1 = &e1.eigenvectors * DMatrix::from_diagonal(&root) * e1.eigenvectors.transpose();
    let m = &sqrt1 * &s2 * &sqrt1;
    let m = (&m + m.transpose()) * 0.5;
    let em = psd_eigen(m, |l| {
        Error::Numeric(format!("product covariance has eigenvalue {l:e}"))
    })?;
    let tr_sqrt: f64 = em.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(mean_term + s1.trace() + s2.trace() - 2.0 * tr_sqrt)
}
