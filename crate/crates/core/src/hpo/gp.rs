//! Gaussian-process regression on the unit cube and expected improvement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

pub const NOISE: f64 = 1e-6;

/// Lengthscales tried when maximising the marginal likelihood.
pub const LENGTHSCALE_GRID: [f64; 8] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0];

/// Matérn-5/2 correlation at distance `r` with lengthscale `l`.
pub fn matern52(r: f64, l: f64) -> f64 {
    let s = 5f64.sqrt() * r / l;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Posterior of a zero-mean, unit-variance GP over standardised targets.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    x: Vec<Vec<f64>>,
    lengthscale: f64,
    y_mean: f64,
    y_std: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_likelihood: f64,
}

impl GaussianProcess {
    /// Fits with a fixed lengthscale. `None` if the kernel matrix is not
    /// positive definite.
    pub fn fit_with(x: &[Vec<f64>], y: &[f64], lengthscale: f64) -> Option<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return None;
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let ys = DVector::from_iterator(n, y.iter().map(|v| (v - y_mean) / y_std));
        let k = DMatrix::from_fn(n, n, |i, j| {
            matern52(distance(&x[i], &x[j]), lengthscale) + if i == j { NOISE } else { 0.0 }
        });
        let chol = k.cholesky()?;
        let alpha = chol.solve(&ys);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let log_likelihood =
            -0.5 * ys.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Some(Self {
            x: x.to_vec(),
            lengthscale,
            y_mean,
            y_std,
            chol,
            alpha,
            log_likelihood,
        })
    }

    /// Fits every grid lengthscale and keeps the most likely.
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Option<Self> {
        LENGTHSCALE_GRID
            .iter()
            .filter_map(|&l| Self::fit_with(x, y, l))
            .filter(|gp| gp.log_likelihood.is_finite())
            .max_by(|a, b| a.log_likelihood.total_cmp(&b.log_likelihood))
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Posterior mean and standard deviation in the original target units.
    pub fn predict(&self, u: &[f64]) -> (f64, f64) {
        let kx = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| matern52(distance(xi, u), self.lengthscale)),
        );
        let mean = kx.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&kx).unwrap_or_else(|| kx.clone());
        let var = (1.0 - v.dot(&v)).max(0.0);
        (self.y_mean + self.y_std * mean, self.y_std * var.sqrt())
    }
}

/// Expected improvement below `best` for a Gaussian posterior (minimisation).
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    if std <= 1e-12 {
        return (best - mean).max(0.0);
    }
    let z = (best - mean) / std;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (best - mean) * n.cdf(z) + std * n.pdf(z)
}
