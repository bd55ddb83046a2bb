//! Output-corruption statistics for key-substitution and strip attacks.
//!
//! Every statistic is built on one algebraic fact, asserted (not assumed)
//! per trial against real layer forwards: with the affine part identical,
//! the output difference between two key choices is `(1-alpha)` times the
//! difference of the permuted modulation values, neuron by neuron.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inr_lock::{InrLinearLayer, PermutationKey};
use crate::numerics::matrix::Vector;
use crate::numerics::rng::RngStream;

/// Absolute tolerance for the per-trial identity checks; all quantities
/// involved are order one, so this is a machine-precision budget.
const IDENTITY_TOL: f64 = 1e-12;

/// Monte-Carlo error statistics for one locked layer under one attack.
///
/// `analytic_bound` is the closed-form prediction for the mean squared
/// error: twice `(1-alpha)^2` times the centered modulation variance for
/// key substitution, and `(1-alpha)^2` times it for stripping. The
/// centered variance `sigma_delta_sq` treats the modulation values as a
/// population; the uncentered second moment is reported alongside because
/// the strip error actually scales with it when the mean is not zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean_error: f64,
    pub mean_sq_error: f64,
    pub analytic_bound: f64,
    pub sigma_delta_sq: f64,
    pub sigma_delta_sq_uncentered: f64,
    pub alpha: f64,
    pub n_out: usize,
    pub n_trials: usize,
}

fn population_moments(deltas: &[f64]) -> (f64, f64, f64) {
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let centered = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let uncentered = deltas.iter().map(|d| d * d).sum::<f64>() / n;
    (mean, centered, uncentered)
}

fn check_trial_inputs(n_out: usize, alpha: f64, n_trials: usize, true_key: Option<&PermutationKey>) -> Result<()> {
    if n_out == 0 {
        return Err(Error::invalid("error stats", "no output neurons"));
    }
    if n_trials == 0 {
        return Err(Error::invalid("error stats", "need at least one trial"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", format!("{alpha} not in [0, 1]")));
    }
    if let Some(k) = true_key {
        if k.n_out() != n_out {
            return Err(Error::invalid(
                "true key",
                format!("{} entries for {} neurons", k.n_out(), n_out),
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Attack {
    /// Attacker assumes the identity permutation.
    Identity,
    /// Attacker draws a fresh uniform permutation per trial.
    Random,
}

/// Monte-Carlo engine over explicit modulation values: per trial the true
/// key is `true_key` (or a fresh uniform draw when absent) and the error
/// at neuron `i` is `(1-alpha) * (delta[true(i)] - delta[attack(i)])`.
fn substitution_stats_for_deltas(
    deltas: &[f64],
    alpha: f64,
    true_key: Option<&PermutationKey>,
    attack: Attack,
    n_trials: usize,
    stream: &mut RngStream,
) -> Result<ErrorStats> {
    check_trial_inputs(deltas.len(), alpha, n_trials, true_key)?;
    let n = deltas.len();
    let (_, centered, uncentered) = population_moments(deltas);
    let scale = 1.0 - alpha;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_trials {
        let drawn;
        let truth = match true_key {
            Some(k) => k,
            None => {
                drawn = PermutationKey::generate(n, stream)?;
                &drawn
            }
        };
        let attack_drawn;
        let attack_key = match attack {
            Attack::Identity => None,
            Attack::Random => {
                attack_drawn = PermutationKey::generate(n, stream)?;
                Some(&attack_drawn)
            }
        };
        for i in 0..n {
            let attacked = match attack_key {
                None => deltas[i],
                Some(a) => deltas[a.map(i)],
            };
            let e = scale * (deltas[truth.map(i)] - attacked);
            sum += e;
            sum_sq += e * e;
        }
    }
    let count = (n * n_trials) as f64;
    Ok(ErrorStats {
        mean_error: sum / count,
        mean_sq_error: sum_sq / count,
        analytic_bound: 2.0 * scale * scale * centered,
        sigma_delta_sq: centered,
        sigma_delta_sq_uncentered: uncentered,
        alpha,
        n_out: n,
        n_trials,
    })
}

/// Key-substitution statistics over raw modulation values, identity
/// attack. Use this to drive the closed form with synthetic populations.
pub fn wrong_key_stats_for_deltas(
    deltas: &[f64],
    alpha: f64,
    true_key: Option<&PermutationKey>,
    n_trials: usize,
    stream: &mut RngStream,
) -> Result<ErrorStats> {
    substitution_stats_for_deltas(deltas, alpha, true_key, Attack::Identity, n_trials, stream)
}

/// Strip statistics over raw modulation values: the error at neuron `i`
/// is the whole modulation term `(1-alpha) * delta[true(i)]`.
pub fn strip_stats_for_deltas(
    deltas: &[f64],
    alpha: f64,
    true_key: Option<&PermutationKey>,
    n_trials: usize,
    stream: &mut RngStream,
) -> Result<ErrorStats> {
    check_trial_inputs(deltas.len(), alpha, n_trials, true_key)?;
    let n = deltas.len();
    let (_, centered, uncentered) = population_moments(deltas);
    let scale = 1.0 - alpha;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_trials {
        let drawn;
        let truth = match true_key {
            Some(k) => k,
            None => {
                drawn = PermutationKey::generate(n, stream)?;
                &drawn
            }
        };
        for i in 0..n {
            let e = scale * deltas[truth.map(i)];
            sum += e;
            sum_sq += e * e;
        }
    }
    let count = (n * n_trials) as f64;
    Ok(ErrorStats {
        mean_error: sum / count,
        mean_sq_error: sum_sq / count,
        analytic_bound: scale * scale * centered,
        sigma_delta_sq: centered,
        sigma_delta_sq_uncentered: uncentered,
        alpha,
        n_out: n,
        n_trials,
    })
}

/// Permutes the cached canonical modulation; bit-identical to
/// `layer.modulation(key)` because both read the same per-neuron values.
fn permuted(canonical: &Vector, key: &PermutationKey) -> Vector {
    Vector::from_vec((0..canonical.len()).map(|i| canonical[key.map(i)]).collect())
}

fn probe_input(n_in: usize, stream: &mut RngStream) -> Vector {
    Vector::from_vec((0..n_in).map(|_| stream.next_normal()).collect())
}

struct LayerTrialCheck<'a> {
    layer: &'a InrLinearLayer,
    canonical: Vector,
    probe: Vector,
    scale: f64,
}

impl<'a> LayerTrialCheck<'a> {
    fn new(layer: &'a InrLinearLayer, stream: &mut RngStream) -> Result<LayerTrialCheck<'a>> {
        Ok(LayerTrialCheck {
            layer,
            canonical: layer.canonical_modulation()?,
            probe: probe_input(layer.n_in(), stream),
            scale: 1.0 - layer.alpha(),
        })
    }

    /// Asserts, on the probe input, that the real forward difference
    /// between the two modulations matches `(1-alpha)` times their value
    /// difference at every neuron.
    fn assert_identity(&self, delta_true: &Vector, delta_attack: &Vector) -> Result<()> {
        let y_true = self.layer.forward_with_modulation(&self.probe, delta_true)?;
        let y_attack = self.layer.forward_with_modulation(&self.probe, delta_attack)?;
        for i in 0..y_true.len() {
            let observed = y_true[i] - y_attack[i];
            let predicted = self.scale * (delta_true[i] - delta_attack[i]);
            if (observed - predicted).abs() > IDENTITY_TOL {
                return Err(Error::invalid(
                    "substitution identity",
                    format!(
                        "neuron {i}: forward difference {observed} vs predicted {predicted}"
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Ties the cached-canonical shortcut to the full keyed forward once:
    /// both paths must agree bit for bit.
    fn assert_keyed_path(&self, key: &PermutationKey) -> Result<()> {
        let via_key = self.layer.forward(&self.probe, key)?;
        let via_cache = self
            .layer
            .forward_with_modulation(&self.probe, &permuted(&self.canonical, key))?;
        for i in 0..via_key.len() {
            if via_key[i].to_bits() != via_cache[i].to_bits() {
                return Err(Error::invalid(
                    "modulation cache",
                    format!("keyed forward and cached forward disagree at neuron {i}"),
                ));
            }
        }
        Ok(())
    }
}

/// Key-substitution statistics for a real locked layer: the attacker uses
/// the identity permutation while the true key is `true_key` (or a fresh
/// uniform draw per trial when absent). Each trial's error values are
/// verified against an actual pair of layer forwards before being counted.
pub fn wrong_key_error_stats(
    layer: &InrLinearLayer,
    true_key: Option<&PermutationKey>,
    n_trials: usize,
    stream: &mut RngStream,
) -> Result<ErrorStats> {
    layer_substitution_stats(layer, true_key, Attack::Identity, n_trials, stream)
}

/// Like `wrong_key_error_stats` but the attacker draws a fresh uniform
/// permutation per trial instead of assuming identity; the closed-form
/// prediction is the same.
pub fn random_key_error_stats(
    layer: &InrLinearLayer,
    true_key: Option<&PermutationKey>,
    n_trials: usize,
    stream: &mut RngStream,
) -> Result<ErrorStats> {
    layer_substitution_stats(layer, true_key, Attack::Random, n_trials, stream)
}

fn layer_substitution_stats(
    layer: &InrLinearLayer,
    true_key: Option<&PermutationKey>,
    attack: Attack,
    n_trials: usize,
    stream: &mut RngStream,
) -> Result<ErrorStats> {
    check_trial_inputs(layer.n_out(), layer.alpha(), n_trials, true_key)?;
    let check = LayerTrialCheck::new(layer, stream)?;
    let n = layer.n_out();
    let (_, centered, uncentered) = population_moments(check.canonical.as_slice());
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for trial in 0..n_trials {
        let drawn;
        let truth = match true_key {
            Some(k) => k,
            None => {
                drawn = PermutationKey::generate(n, stream)?;
                &drawn
            }
        };
        let attack_key = match attack {
            Attack::Identity => PermutationKey::identity(n)?,
            Attack::Random => PermutationKey::generate(n, stream)?,
        };
        let delta_true = permuted(&check.canonical, truth);
        let delta_attack = permuted(&check.canonical, &attack_key);
        if trial == 0 {
            check.assert_keyed_path(truth)?;
        }
        check.assert_identity(&delta_true, &delta_attack)?;
        for i in 0..n {
            let e = check.scale * (delta_true[i] - delta_attack[i]);
            sum += e;
            sum_sq += e * e;
        }
    }
    let count = (n * n_trials) as f64;
    Ok(ErrorStats {
        mean_error: sum / count,
        mean_sq_error: sum_sq / count,
        analytic_bound: 2.0 * check.scale * check.scale * centered,
        sigma_delta_sq: centered,
        sigma_delta_sq_uncentered: uncentered,
        alpha: layer.alpha(),
        n_out: n,
        n_trials,
    })
}

/// Strip statistics for a real locked layer: the attacker removes the
/// modulation term entirely, so the error is the term itself. The
/// identity `authorized - stripped == (1-alpha) * modulation` is checked
/// per trial against real forwards.
pub fn strip_error_stats(
    layer: &InrLinearLayer,
    true_key: Option<&PermutationKey>,
    n_trials: usize,
    stream: &mut RngStream,
) -> Result<ErrorStats> {
    check_trial_inputs(layer.n_out(), layer.alpha(), n_trials, true_key)?;
    let check = LayerTrialCheck::new(layer, stream)?;
    let n = layer.n_out();
    let (_, centered, uncentered) = population_moments(check.canonical.as_slice());
    let stripped = layer.forward_stripped(&check.probe)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for trial in 0..n_trials {
        let drawn;
        let truth = match true_key {
            Some(k) => k,
            None => {
                drawn = PermutationKey::generate(n, stream)?;
                &drawn
            }
        };
        let delta_true = permuted(&check.canonical, truth);
        if trial == 0 {
            check.assert_keyed_path(truth)?;
        }
        let authorized = layer.forward_with_modulation(&check.probe, &delta_true)?;
        for i in 0..n {
            let observed = authorized[i] - stripped[i];
            let predicted = check.scale * delta_true[i];
            if (observed - predicted).abs() > IDENTITY_TOL {
                return Err(Error::invalid(
                    "strip identity",
                    format!("neuron {i}: forward difference {observed} vs predicted {predicted}"),
                ));
            }
            sum += predicted;
            sum_sq += predicted * predicted;
        }
    }
    let count = (n * n_trials) as f64;
    Ok(ErrorStats {
        mean_error: sum / count,
        mean_sq_error: sum_sq / count,
        analytic_bound: check.scale * check.scale * centered,
        sigma_delta_sq: centered,
        sigma_delta_sq_uncentered: uncentered,
        alpha: layer.alpha(),
        n_out: n,
        n_trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr_lock::{Activation, InrInit};
    use crate::numerics::rng::derive_stream;

    fn random_layer(alpha: f64, n_out: usize, seed: u64) -> InrLinearLayer {
        let mut s = derive_stream(seed, &[5]);
        InrLinearLayer::new(3, n_out, alpha, 3, 6, 3, Activation::Relu, InrInit::FullRandom, &mut s)
            .unwrap()
    }

    fn standardized_normals(n: usize, seed: u64) -> Vec<f64> {
        let mut s = derive_stream(seed, &[6]);
        let mut v: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / var.sqrt();
        for x in &mut v {
            *x = (*x - mean) * inv;
        }
        v
    }

    #[test]
    fn full_blend_makes_every_error_exactly_zero() {
        let layer = random_layer(1.0, 12, 1);
        let mut s = derive_stream(1, &[7]);
        let stats = wrong_key_error_stats(&layer, None, 50, &mut s).unwrap();
        assert_eq!(stats.mean_error, 0.0);
        assert_eq!(stats.mean_sq_error, 0.0);
        assert_eq!(stats.analytic_bound, 0.0);
        let strip = strip_error_stats(&layer, None, 50, &mut s).unwrap();
        assert_eq!(strip.mean_sq_error, 0.0);
    }

    #[test]
    fn identity_true_key_defeats_the_identity_attacker_exactly() {
        let layer = random_layer(0.5, 10, 2);
        let id = PermutationKey::identity(10).unwrap();
        let mut s = derive_stream(2, &[7]);
        let stats = wrong_key_error_stats(&layer, Some(&id), 20, &mut s).unwrap();
        assert_eq!(stats.mean_error, 0.0);
        assert_eq!(stats.mean_sq_error, 0.0);
    }

    #[test]
    fn zeroed_modulation_network_makes_stripping_free() {
        let mut s = derive_stream(3, &[5]);
        let layer = InrLinearLayer::new(
            3,
            8,
            0.5,
            3,
            6,
            3,
            Activation::Relu,
            InrInit::ZeroOutput,
            &mut s,
        )
        .unwrap();
        let mut s = derive_stream(3, &[7]);
        let stats = strip_error_stats(&layer, None, 30, &mut s).unwrap();
        assert_eq!(stats.mean_error, 0.0);
        assert_eq!(stats.mean_sq_error, 0.0);
        assert_eq!(stats.sigma_delta_sq, 0.0);
    }

    #[test]
    fn substitution_mean_square_converges_to_twice_the_scaled_variance() {
        let deltas = standardized_normals(256, 4);
        let mut s = derive_stream(4, &[8]);
        let stats = wrong_key_stats_for_deltas(&deltas, 0.5, None, 2_000, &mut s).unwrap();
        assert!((stats.sigma_delta_sq - 1.0).abs() < 1e-12);
        assert!((stats.analytic_bound - 0.5).abs() < 1e-12);
        let ratio = stats.mean_sq_error / stats.analytic_bound;
        assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
        assert!(stats.mean_error.abs() < 0.01);
    }

    #[test]
    fn strip_mean_square_converges_to_the_scaled_variance() {
        let deltas = standardized_normals(256, 5);
        let mut s = derive_stream(5, &[8]);
        let stats = strip_stats_for_deltas(&deltas, 0.0, None, 2_000, &mut s).unwrap();
        assert!((stats.analytic_bound - 1.0).abs() < 1e-12);
        let ratio = stats.mean_sq_error / stats.analytic_bound;
        assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn halving_the_blend_quadruples_the_mean_square_error() {
        let deltas = standardized_normals(64, 6);
        let a = strip_stats_for_deltas(&deltas, 0.5, None, 500, &mut derive_stream(6, &[9])).unwrap();
        let b = strip_stats_for_deltas(&deltas, 0.0, None, 500, &mut derive_stream(6, &[9])).unwrap();
        let ratio = b.mean_sq_error / a.mean_sq_error;
        assert!((ratio - 4.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn real_layer_statistics_match_their_own_population() {
        let layer = random_layer(0.5, 32, 7);
        let mut s = derive_stream(7, &[9]);
        let stats = wrong_key_error_stats(&layer, None, 3_000, &mut s).unwrap();
        assert_eq!(stats.n_out, 32);
        assert_eq!(stats.alpha, 0.5);
        let ratio = stats.mean_sq_error / stats.analytic_bound;
        assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");

        let mut s = derive_stream(7, &[10]);
        let random_attack = random_key_error_stats(&layer, None, 3_000, &mut s).unwrap();
        let ratio = random_attack.mean_sq_error / random_attack.analytic_bound;
        assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn fixed_true_key_statistics_also_track_the_closed_form() {
        let layer = random_layer(0.25, 24, 8);
        let mut ks = derive_stream(8, &[1]);
        let truth = PermutationKey::generate(24, &mut ks).unwrap();
        let mut s = derive_stream(8, &[2]);
        let stats = wrong_key_error_stats(&layer, Some(&truth), 4_000, &mut s).unwrap();
        let ratio = stats.mean_sq_error / stats.analytic_bound;
        assert!((ratio - 1.0).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn strip_error_is_key_invariant() {
        // Permuting a population never changes its second moment, so the
        // strip mean square is identical for every true key.
        let layer = random_layer(0.5, 16, 9);
        let mut ka = derive_stream(9, &[1]);
        let key_a = PermutationKey::generate(16, &mut ka).unwrap();
        let key_b = PermutationKey::generate(16, &mut ka).unwrap();
        let a = strip_error_stats(&layer, Some(&key_a), 1, &mut derive_stream(9, &[2])).unwrap();
        let b = strip_error_stats(&layer, Some(&key_b), 1, &mut derive_stream(9, &[2])).unwrap();
        assert!((a.mean_sq_error - b.mean_sq_error).abs() < 1e-15);
    }

    #[test]
    fn degenerate_requests_are_rejected() {
        let layer = random_layer(0.5, 8, 10);
        let mut s = derive_stream(10, &[1]);
        assert!(wrong_key_error_stats(&layer, None, 0, &mut s).is_err());
        let short = PermutationKey::identity(4).unwrap();
        assert!(wrong_key_error_stats(&layer, Some(&short), 10, &mut s).is_err());
        assert!(wrong_key_stats_for_deltas(&[], 0.5, None, 10, &mut s).is_err());
        assert!(wrong_key_stats_for_deltas(&[1.0, 2.0], 1.5, None, 10, &mut s).is_err());
    }
}
