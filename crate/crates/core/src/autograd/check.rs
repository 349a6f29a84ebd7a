use ndarray::Array2;

use super::{Graph, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]. Central differences at `h = 1e-6`
/// carry roughly `1e-10` of roundoff on an O(1) loss, so entries whose
/// gradient is smaller than this are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `|a - b| / max(RELATIVE_FLOOR, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x + h) - f(x - h)) / 2h`, one coordinate at a time.
///
/// `f` receives a fresh graph and one trainable leaf per entry of `inputs`.
/// Returns the largest [`relative_error`] over all coordinates.
pub fn gradient_check<F>(f: F, inputs: &[Array2<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array2<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.constant(v.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.shape(out) != (1, 1) {
            return Err(Error::invalid("gradient_check needs a scalar-valued function"));
        }
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Array2<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(x.dim()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for idx in 0..inputs[k].len() {
            let (rows, cols) = inputs[k].dim();
            let at = [idx / cols.max(1), idx % cols.max(1)];
            debug_assert!(at[0] < rows);
            let base = inputs[k][at];
            probe[k][at] = base + h;
            let up = eval(&probe)?;
            probe[k][at] = base - h;
            let down = eval(&probe)?;
            probe[k][at] = base;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k][at], numeric));
        }
    }
    Ok(worst)
}
