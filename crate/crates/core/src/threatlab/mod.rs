//! Attack lab: what a key-less adversary obtains from a locked model.
//!
//! Three adversaries are modeled. `identity_key` runs the model with the
//! default (unpermuted) coordinate order, `random_key` with a fresh
//! uniformly drawn permutation per locked layer, and `strip_inr` deletes
//! the modulation term altogether. The lab measures output corruption
//! against closed-form predictions, gradient mismatch for adversaries who
//! try to keep training, and end-to-end task damage on an evaluation set.

pub mod error_stats;
pub mod grad;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inr_lock::{KeySet, PermutationKey};
use crate::model::{metrics, Model, Target};
use crate::numerics::matrix::Vector;
use crate::numerics::rng::{derive_stream, RngStream};

pub use error_stats::{
    random_key_error_stats, strip_error_stats, strip_stats_for_deltas, wrong_key_error_stats,
    wrong_key_stats_for_deltas, ErrorStats,
};
pub use grad::{
    gradient_mismatch, jacobian_diagnostics, layer_theta_mismatch, CorrelationSummary, GapStat,
    GradMismatchReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    IdentityKey,
    RandomKey,
    StripInr,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::IdentityKey => "identity_key",
            AttackKind::RandomKey => "random_key",
            AttackKind::StripInr => "strip_inr",
        }
    }

    pub(crate) fn stream_tag(self) -> u64 {
        match self {
            AttackKind::IdentityKey => 1,
            AttackKind::RandomKey => 2,
            AttackKind::StripInr => 3,
        }
    }
}

fn require_locked(model: &Model, op: &'static str) -> Result<()> {
    if model.has_locked_layers() {
        Ok(())
    } else {
        Err(Error::invalid(op, "nothing to attack: the model has no locked layers"))
    }
}

/// The key set a substitution adversary would use: identity permutations,
/// or one fresh uniform permutation per locked layer drawn from `stream`.
/// Stripping substitutes no keys and is rejected here.
pub fn attack_key_set(model: &Model, kind: AttackKind, stream: &mut RngStream) -> Result<KeySet> {
    require_locked(model, "attack keys")?;
    let mut keys = KeySet::new();
    for name in model.locked_layer_names() {
        let n_out = model.locked_layer(&name).expect("locked name resolves").n_out();
        let key = match kind {
            AttackKind::IdentityKey => PermutationKey::identity(n_out)?,
            AttackKind::RandomKey => PermutationKey::generate(n_out, stream)?,
            AttackKind::StripInr => {
                return Err(Error::invalid("attack keys", "stripping substitutes no keys"))
            }
        };
        keys.insert(name, key);
    }
    Ok(keys)
}

/// Batch forward as the adversary sees it.
pub fn attack_forward_batch(
    model: &Model,
    xs: &[Vector],
    kind: AttackKind,
    stream: &mut RngStream,
) -> Result<Vec<Vector>> {
    require_locked(model, "attack forward")?;
    match kind {
        AttackKind::StripInr => model.forward_batch_stripped(xs),
        _ => {
            let keys = attack_key_set(model, kind, stream)?;
            model.forward_batch_unchecked(xs, &keys)
        }
    }
}

/// Single-input convenience wrapper over `attack_forward_batch`.
pub fn attack_forward(
    model: &Model,
    x: &Vector,
    kind: AttackKind,
    stream: &mut RngStream,
) -> Result<Vector> {
    let mut out = attack_forward_batch(model, std::slice::from_ref(x), kind, stream)?;
    Ok(out.remove(0))
}

/// Spec-level entry point for gradient comparison under a named attack:
/// draws the adversary's keys for `kind` and compares training gradients
/// on the batch. Stripping has no substituted-key gradient and is
/// rejected.
pub fn gradient_mismatch_under_attack(
    model: &Model,
    xs: &[Vector],
    targets: &[Target],
    true_keys: &KeySet,
    kind: AttackKind,
    stream: &mut RngStream,
) -> Result<GradMismatchReport> {
    if kind == AttackKind::StripInr {
        return Err(Error::invalid(
            "gradient mismatch",
            "stripping substitutes no keys; compare identity_key or random_key",
        ));
    }
    let attack_keys = attack_key_set(model, kind, stream)?;
    gradient_mismatch(model, xs, targets, true_keys, &attack_keys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSuiteConfig {
    pub kinds: Vec<AttackKind>,
    /// Monte-Carlo trials per locked layer for the error statistics.
    pub n_error_trials: usize,
    /// Number of evaluation samples fed to the gradient comparison.
    pub grad_batch: usize,
    pub seed: u64,
}

impl Default for AttackSuiteConfig {
    fn default() -> AttackSuiteConfig {
        AttackSuiteConfig {
            kinds: vec![AttackKind::IdentityKey, AttackKind::RandomKey, AttackKind::StripInr],
            n_error_trials: 1000,
            grad_batch: 32,
            seed: 0,
        }
    }
}

/// One adversary's complete scorecard against one frozen model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub authorized_loss: f64,
    pub authorized_accuracy: Option<f64>,
    pub attacked_loss: f64,
    pub attacked_accuracy: Option<f64>,
    /// Per locked layer.
    pub error_stats: BTreeMap<String, ErrorStats>,
    /// Present for key-substitution adversaries.
    pub grad_mismatch: Option<GradMismatchReport>,
    /// Fingerprints the model's locked layers were bound to.
    pub expected_key_fingerprints: BTreeMap<String, String>,
    /// Fingerprints of the keys used for the authorized evaluation.
    pub evaluated_key_fingerprints: BTreeMap<String, String>,
    /// Fingerprints of the adversary's substituted keys, when any.
    pub attack_key_fingerprints: Option<BTreeMap<String, String>>,
    pub n_error_trials: usize,
    pub seed: u64,
    pub eval_size: usize,
}

/// Evaluates every configured adversary against one model + key set on
/// one evaluation set. The key fingerprints are checked before anything
/// runs; everything after that is deterministic in `cfg.seed`.
pub fn run_attack_suite(
    model: &Model,
    keys: &KeySet,
    xs: &[Vector],
    targets: &[Target],
    cfg: &AttackSuiteConfig,
) -> Result<Vec<AttackReport>> {
    require_locked(model, "attack suite")?;
    model.check_keys(keys)?;
    if cfg.kinds.is_empty() {
        return Err(Error::invalid("attack suite", "no attack kinds configured"));
    }
    if cfg.n_error_trials == 0 {
        return Err(Error::invalid("attack suite", "need at least one error trial"));
    }
    let authorized = model.evaluate(xs, targets, keys)?;
    let expected = model.expected_fingerprints();
    let evaluated: BTreeMap<String, String> = keys.fingerprints();

    let mut reports = Vec::with_capacity(cfg.kinds.len());
    for &kind in &cfg.kinds {
        let root = derive_stream(cfg.seed, &[kind.stream_tag()]);

        let attack_keys = match kind {
            AttackKind::StripInr => None,
            _ => Some(attack_key_set(model, kind, &mut root.child(1))?),
        };
        let outputs = match &attack_keys {
            None => model.forward_batch_stripped(xs)?,
            Some(k) => model.forward_batch_unchecked(xs, k)?,
        };
        let attacked = metrics(&outputs, targets, model.task())?;

        let mut error_stats = BTreeMap::new();
        for (li, name) in model.locked_layer_names().into_iter().enumerate() {
            let layer = model.locked_layer(&name).expect("locked name resolves");
            let true_key = keys.get(&name).expect("checked above");
            let mut es = root.child(2).child(li as u64);
            let stats = match kind {
                AttackKind::IdentityKey => {
                    wrong_key_error_stats(layer, Some(true_key), cfg.n_error_trials, &mut es)?
                }
                AttackKind::RandomKey => {
                    random_key_error_stats(layer, Some(true_key), cfg.n_error_trials, &mut es)?
                }
                AttackKind::StripInr => {
                    strip_error_stats(layer, Some(true_key), cfg.n_error_trials, &mut es)?
                }
            };
            error_stats.insert(name, stats);
        }

        let grad_mismatch = match &attack_keys {
            None => None,
            Some(ak) => {
                let n = cfg.grad_batch.min(xs.len()).max(1);
                Some(gradient_mismatch(model, &xs[..n], &targets[..n], keys, ak)?)
            }
        };

        reports.push(AttackReport {
            kind,
            authorized_loss: authorized.loss,
            authorized_accuracy: authorized.accuracy,
            attacked_loss: attacked.loss,
            attacked_accuracy: attacked.accuracy,
            error_stats,
            grad_mismatch,
            expected_key_fingerprints: expected.clone(),
            evaluated_key_fingerprints: evaluated.clone(),
            attack_key_fingerprints: attack_keys.as_ref().map(KeySet::fingerprints),
            n_error_trials: cfg.n_error_trials,
            seed: cfg.seed,
            eval_size: xs.len(),
        });
    }
    Ok(reports)
}
