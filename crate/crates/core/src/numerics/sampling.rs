//! Distribution samplers layered on `RngStream`.

use crate::error::{Error, Result};
use crate::numerics::matrix::{Matrix, Vector};
use crate::numerics::rng::RngStream;

/// `n` draws from N(0, std^2). Draws are `std * z` with `z` standard
/// normal, so scaling the std scales the output stream exactly.
pub fn gaussian(stream: &mut RngStream, n: usize, std: f64) -> Result<Vector> {
    if !std.is_finite() || std < 0.0 {
        return Err(Error::invalid("gaussian std", format!("{std}")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(std * stream.next_normal());
    }
    Ok(Vector::from_vec(out))
}

/// Weight init N(0, 2 / fan_in) with fan_in = cols, filled row-major.
pub fn kaiming_init(rows: usize, cols: usize, stream: &mut RngStream) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("kaiming_init dims", format!("{rows}x{cols}")));
    }
    let std = (2.0 / cols as f64).sqrt();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(std * stream.next_normal());
    }
    Matrix::new(rows, cols, data)
}

/// Gamma(shape, 1) via Marsaglia-Tsang squeeze, with the boost
/// `Gamma(a) = Gamma(a+1) * U^(1/a)` for shape < 1.
pub fn sample_gamma(stream: &mut RngStream, shape: f64) -> Result<f64> {
    if !shape.is_finite() || shape <= 0.0 {
        return Err(Error::invalid("gamma shape", format!("{shape}")));
    }
    if shape < 1.0 {
        let g = sample_gamma(stream, shape + 1.0)?;
        let u = stream.next_f64().max(f64::MIN_POSITIVE);
        return Ok(g * u.powf(1.0 / shape));
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (3.0 * d.sqrt());
    loop {
        let x = stream.next_normal();
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = stream.next_f64().max(f64::MIN_POSITIVE);
        if u < 1.0 - 0.0331 * x * x * x * x {
            return Ok(d * v);
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return Ok(d * v);
        }
    }
}

/// Symmetric Dirichlet(alpha) over k parts: normalized iid Gamma draws.
pub fn sample_dirichlet(stream: &mut RngStream, alpha: f64, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("dirichlet parts", "k must be nonzero"));
    }
    let mut gs = Vec::with_capacity(k);
    let mut total = 0.0;
    for _ in 0..k {
        let g = sample_gamma(stream, alpha)?;
        total += g;
        gs.push(g);
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::invalid("dirichlet draw", "degenerate gamma total"));
    }
    for g in &mut gs {
        *g /= total;
    }
    Ok(gs)
}
