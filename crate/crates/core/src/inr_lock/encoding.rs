//! Output-index coordinates and their sinusoidal encodings.
//!
//! Output index `j` of a layer with `n_out` neurons sits at
//! `C(j) = 2 j / (n_out - 1) - 1`, an even grid over `[-1, 1]`
//! (a single-neuron layer sits at 0). The encoding of a coordinate `c` is
//! `(sin(2^0 pi c), cos(2^0 pi c), ..., sin(2^(L-1) pi c), cos(2^(L-1) pi c))`,
//! length `2 L`.

use crate::error::{Error, Result};
use crate::numerics::matrix::Vector;

pub const MAX_LEVELS: usize = 16;

pub fn coordinate(j: usize, n_out: usize) -> Result<f64> {
    if n_out == 0 {
        return Err(Error::invalid("coordinate", "n_out must be nonzero"));
    }
    if j >= n_out {
        return Err(Error::invalid("coordinate", format!("index {j} out of range 0..{n_out}")));
    }
    if n_out == 1 {
        return Ok(0.0);
    }
    Ok(2.0 * j as f64 / (n_out - 1) as f64 - 1.0)
}

pub fn encode(c: f64, levels: usize) -> Result<Vector> {
    if levels == 0 || levels > MAX_LEVELS {
        return Err(Error::invalid("encoding levels", format!("{levels} not in 1..={MAX_LEVELS}")));
    }
    if !c.is_finite() {
        return Err(Error::NonFinite { op: "encode" });
    }
    let mut out = Vec::with_capacity(2 * levels);
    for l in 0..levels {
        let freq = (1u64 << l) as f64 * std::f64::consts::PI * c;
        out.push(freq.sin());
        out.push(freq.cos());
    }
    Ok(Vector::from_vec(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_and_midpoint() {
        assert_eq!(coordinate(0, 8).unwrap(), -1.0);
        assert_eq!(coordinate(7, 8).unwrap(), 1.0);
        assert_eq!(coordinate(3, 7).unwrap(), 0.0);
        assert_eq!(coordinate(0, 1).unwrap(), 0.0);
        assert!(coordinate(8, 8).is_err());
        assert!(coordinate(0, 0).is_err());
    }

    #[test]
    fn grid_is_even() {
        let n = 9;
        let step = 2.0 / (n - 1) as f64;
        for j in 1..n {
            let gap = coordinate(j, n).unwrap() - coordinate(j - 1, n).unwrap();
            assert!((gap - step).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_coordinate_is_sin0_cos0_pattern() {
        let enc = encode(0.0, 2).unwrap();
        assert_eq!(enc.as_slice(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encoding_length_and_endpoint_values() {
        for levels in 1..=6 {
            let enc = encode(1.0, levels).unwrap();
            assert_eq!(enc.len(), 2 * levels);
            for l in 0..levels {
                // sin(2^l pi) = 0, cos(2^l pi) alternates sign with l = 0
                let expect_cos = if l == 0 { -1.0 } else { 1.0 };
                assert!(enc[2 * l].abs() < 1e-12, "level {l} sin {}", enc[2 * l]);
                assert!((enc[2 * l + 1] - expect_cos).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_levels_and_non_finite() {
        assert!(encode(0.5, 0).is_err());
        assert!(encode(0.5, 17).is_err());
        assert!(encode(f64::NAN, 4).is_err());
    }
}
