//! Central finite differences, the oracle every analytic gradient in this
//! crate is tested against.

use crate::error::{Error, Result};
use crate::numerics::matrix::Vector;

/// Central-difference gradient of `f` at `x` with step `h`:
/// `g_i = (f(x + h e_i) - f(x - h e_i)) / (2h)`.
///
/// `h` must be positive and finite; any non-finite value returned by `f`
/// is an error, since it would silently poison the estimate.
pub fn finite_diff_grad<F>(mut f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<f64>,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::invalid("finite difference step", format!("{h}")));
    }
    let mut grad = Vector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + h;
        let up = f(&probe)?;
        probe[i] = xi - h;
        let down = f(&probe)?;
        probe[i] = xi;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Scale-free gap between an analytic and a numeric gradient:
/// `|g_a - g_n| / max(|g_a|, |g_n|, floor)`.
pub fn relative_gap(analytic: &Vector, numeric: &Vector) -> Result<f64> {
    let diff = analytic.sub(numeric)?;
    let denom = analytic.l2_norm().max(numeric.l2_norm()).max(1e-12);
    Ok(diff.l2_norm() / denom)
}
