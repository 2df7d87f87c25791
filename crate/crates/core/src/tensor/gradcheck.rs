//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

/// Compares an analytic gradient of the scalar function `f` at `point` with
/// central differences of step `h`, returning the largest per-coordinate
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_gradcheck<F>(f: F, analytic: &[f64], point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, point has {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / 1f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
