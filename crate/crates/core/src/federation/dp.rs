//! Update sanitization: norm clipping plus calibrated Gaussian noise,
//! applied to client deltas before they leave for the server.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::ParamVector;
use crate::numerics::rng::RngStream;

fn default_clip() -> f64 {
    1.0
}
fn default_multiplier() -> f64 {
    1.29
}
fn default_delta() -> f64 {
    1e-5
}

/// Sanitization parameters. `delta` is the privacy-accounting failure
/// probability the noise multiplier was calibrated for; it is recorded in
/// reports but plays no role in the arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_multiplier")]
    pub noise_multiplier: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl Default for DpConfig {
    fn default() -> DpConfig {
        DpConfig {
            clip_norm: default_clip(),
            noise_multiplier: default_multiplier(),
            delta: default_delta(),
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm", format!("{} must be positive", self.clip_norm)));
        }
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier >= 0.0) {
            return Err(Error::invalid(
                "noise_multiplier",
                format!("{} must be non-negative", self.noise_multiplier),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("delta", format!("{} not in (0, 1)", self.delta)));
        }
        Ok(())
    }

    /// Standard deviation of the per-coordinate noise.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_norm
    }
}

/// Scales `delta` down so its l2 norm is at most `clip`; a vector already
/// inside the ball is left bit-for-bit unchanged. Returns the norm before
/// clipping.
pub fn clip_to_norm(delta: &mut ParamVector, clip: f64) -> f64 {
    let norm = delta.l2_norm();
    if norm > clip {
        delta.scale_in_place(clip / norm);
    }
    norm
}

/// Adds independent zero-mean Gaussian noise of the given standard
/// deviation to every coordinate. A zero std adds exactly zero but still
/// consumes the same number of draws, keeping stream positions comparable
/// across noise settings.
pub fn add_gaussian_noise(delta: &mut ParamVector, std: f64, stream: &mut RngStream) {
    for v in delta.values_mut() {
        *v += std * stream.next_normal();
    }
}

/// Full sanitization: clip then perturb. Returns the pre-clip norm.
pub fn dp_sanitize(delta: &mut ParamVector, cfg: &DpConfig, stream: &mut RngStream) -> f64 {
    let norm = clip_to_norm(delta, cfg.clip_norm);
    add_gaussian_noise(delta, cfg.noise_std(), stream);
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::SegmentShape;
    use crate::numerics::rng::derive_stream;

    fn vector_of(values: Vec<f64>) -> ParamVector {
        let mut pv = ParamVector::new();
        let len = values.len();
        pv.push("p", SegmentShape::Vector { len }, values).unwrap();
        pv
    }

    #[test]
    fn clipping_caps_the_norm_and_preserves_direction() {
        let mut big = vector_of(vec![3.0, 4.0]); // norm 5
        let before = clip_to_norm(&mut big, 1.0);
        assert_eq!(before, 5.0);
        let got = big.flatten();
        assert!((big.l2_norm() - 1.0).abs() < 1e-12);
        assert!((got[0] - 0.6).abs() < 1e-12 && (got[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn vectors_inside_the_ball_are_untouched() {
        let mut small = vector_of(vec![0.1, -0.2, 0.05]);
        let original = small.flatten();
        clip_to_norm(&mut small, 1.0);
        let after = small.flatten();
        assert!(original.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_noise_sanitization_is_exactly_the_clip() {
        let cfg = DpConfig { clip_norm: 1.0, noise_multiplier: 0.0, delta: 1e-5 };
        let mut noisy = vector_of(vec![3.0, 4.0]);
        let mut clipped_only = vector_of(vec![3.0, 4.0]);
        dp_sanitize(&mut noisy, &cfg, &mut derive_stream(1, &[0]));
        clip_to_norm(&mut clipped_only, 1.0);
        assert_eq!(noisy.flatten(), clipped_only.flatten());
    }

    #[test]
    fn noise_std_tracks_the_configuration() {
        let mut sum_sq = 0.0;
        let n = 200_000usize;
        let cfg = DpConfig { clip_norm: 2.0, noise_multiplier: 1.29, delta: 1e-5 };
        let mut stream = derive_stream(2, &[0]);
        let mut pv = vector_of(vec![0.0; n]);
        add_gaussian_noise(&mut pv, cfg.noise_std(), &mut stream);
        for v in pv.values() {
            sum_sq += v * v;
        }
        let std = (sum_sq / n as f64).sqrt();
        assert!(
            (std - 2.58).abs() / 2.58 < 0.02,
            "observed std {std}, expected about 2.58"
        );
    }

    #[test]
    fn configuration_bounds_are_enforced() {
        assert!(DpConfig::default().validate().is_ok());
        assert!(DpConfig { clip_norm: 0.0, ..Default::default() }.validate().is_err());
        assert!(DpConfig { noise_multiplier: -1.0, ..Default::default() }.validate().is_err());
        assert!(DpConfig { delta: 0.0, ..Default::default() }.validate().is_err());
        assert!(DpConfig { delta: 1.0, ..Default::default() }.validate().is_err());
    }
}
