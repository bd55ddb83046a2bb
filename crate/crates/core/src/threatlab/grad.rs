//! Gradient mismatch between training under the true keys and training
//! under substituted keys, on the same batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inr_lock::{coordinate, encode, InrLinearLayer, KeySet, PermutationKey};
use crate::model::loss::mse_with_grad;
use crate::model::{Model, Target};
use crate::numerics::matrix::Vector;

/// Gap between two gradient vectors restricted to one block of
/// parameters. `l2_gap` is the squared norm of the difference; `cosine`
/// is absent when either side is identically zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStat {
    pub l2_gap: f64,
    pub cosine: Option<f64>,
}

fn gap_stat(a: &[f64], b: &[f64]) -> GapStat {
    let mut diff_sq = 0.0;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff_sq += (x - y) * (x - y);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let cosine = if na > 0.0 && nb > 0.0 {
        Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
    } else {
        None
    };
    GapStat { l2_gap: diff_sq, cosine }
}

/// How strongly the per-neuron modulation gradients overlap: summary of
/// the off-diagonal entries of the correlation (normalized Gram) matrix
/// of the per-coordinate parameter Jacobians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub n_coords: usize,
    pub mean_abs_off_diagonal: f64,
    pub max_abs_off_diagonal: f64,
}

/// Per-coordinate Jacobian diagnostics for one locked layer: the
/// population variance of the per-neuron Jacobian norms (the empirical
/// stand-in for the spread constant in the gradient-gap bound) and the
/// pairwise correlation summary.
pub fn jacobian_diagnostics(layer: &InrLinearLayer) -> Result<(f64, CorrelationSummary)> {
    let n = layer.n_out();
    let mut jacobians = Vec::with_capacity(n);
    for i in 0..n {
        let enc = encode(coordinate(i, n)?, layer.levels())?;
        jacobians.push(layer.inr().theta_jacobian(&enc)?);
    }
    let norms: Vec<f64> = jacobians
        .iter()
        .map(|j| j.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mean = norms.iter().sum::<f64>() / n as f64;
    let variance = norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;

    let mut sum_abs = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = jacobians[i].iter().zip(&jacobians[j]).map(|(a, b)| a * b).sum();
            let corr = (dot / (norms[i] * norms[j])).abs();
            sum_abs += corr;
            max_abs = max_abs.max(corr);
            pairs += 1;
        }
    }
    let summary = CorrelationSummary {
        n_coords: n,
        mean_abs_off_diagonal: if pairs == 0 { 0.0 } else { sum_abs / pairs as f64 },
        max_abs_off_diagonal: max_abs,
    };
    Ok((variance, summary))
}

/// Full comparison of the loss gradient under true keys vs substituted
/// keys on one batch. Blocks: `theta` collects the modulation-network
/// segments, `weight` the matrices (including adapters and norm gains),
/// `bias` the offset vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradMismatchReport {
    pub l2_gap: f64,
    pub cosine: Option<f64>,
    /// Absent when every locked layer runs at full blend, where the
    /// modulation gradient is identically zero on both sides.
    pub theta: Option<GapStat>,
    pub weight: GapStat,
    pub bias: GapStat,
    pub per_segment: BTreeMap<String, GapStat>,
    /// Per locked layer: population variance of per-coordinate Jacobian
    /// norms.
    pub jacobian_variance_estimate: BTreeMap<String, f64>,
    pub jacobian_correlation: BTreeMap<String, CorrelationSummary>,
    pub theta_note: Option<String>,
    pub true_loss: f64,
    pub attack_loss: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SegmentClass {
    Theta,
    Weight,
    Bias,
}

fn classify(name: &str) -> SegmentClass {
    if name.ends_with(".inr") {
        SegmentClass::Theta
    } else if name.ends_with("lora.a")
        || name.ends_with("lora.b")
        || name.ends_with(".w")
        || name.ends_with("ln.g")
    {
        SegmentClass::Weight
    } else {
        SegmentClass::Bias
    }
}

/// Computes the training gradient twice on one batch — once under the
/// true keys, once under `attack_keys` — and reports where they diverge.
pub fn gradient_mismatch(
    model: &Model,
    xs: &[Vector],
    targets: &[Target],
    true_keys: &KeySet,
    attack_keys: &KeySet,
) -> Result<GradMismatchReport> {
    if !model.has_locked_layers() {
        return Err(Error::invalid("gradient mismatch", "nothing to attack: no locked layers"));
    }
    let (true_loss, g_true) = model.backward(xs, targets, true_keys, None)?;
    let (attack_loss, g_attack) = model.backward_unchecked(xs, targets, attack_keys, None)?;

    let mut per_segment = BTreeMap::new();
    let mut buckets: BTreeMap<&'static str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut all_true = Vec::new();
    let mut all_attack = Vec::new();
    for (st, sa) in g_true.segments().iter().zip(g_attack.segments()) {
        per_segment.insert(st.name.clone(), gap_stat(&st.values, &sa.values));
        let bucket = match classify(&st.name) {
            SegmentClass::Theta => "theta",
            SegmentClass::Weight => "weight",
            SegmentClass::Bias => "bias",
        };
        let entry = buckets.entry(bucket).or_default();
        entry.0.extend_from_slice(&st.values);
        entry.1.extend_from_slice(&sa.values);
        all_true.extend_from_slice(&st.values);
        all_attack.extend_from_slice(&sa.values);
    }
    let bucket_stat = |name: &str| -> GapStat {
        buckets
            .get(name)
            .map(|(a, b)| gap_stat(a, b))
            .unwrap_or(GapStat { l2_gap: 0.0, cosine: None })
    };

    let locked = model.locked_layer_names();
    let all_full_blend = locked
        .iter()
        .all(|n| model.locked_layer(n).map(|l| l.alpha() == 1.0).unwrap_or(false));
    let (theta, theta_note) = if all_full_blend {
        (
            None,
            Some(
                "modulation gradient is identically zero at full blend; \
                 mismatch undefined on that block"
                    .to_string(),
            ),
        )
    } else {
        (Some(bucket_stat("theta")), None)
    };

    let mut jacobian_variance_estimate = BTreeMap::new();
    let mut jacobian_correlation = BTreeMap::new();
    for name in &locked {
        let layer = model.locked_layer(name).expect("locked name resolves");
        let (var, corr) = jacobian_diagnostics(layer)?;
        jacobian_variance_estimate.insert(name.clone(), var);
        jacobian_correlation.insert(name.clone(), corr);
    }

    let total = gap_stat(&all_true, &all_attack);
    Ok(GradMismatchReport {
        l2_gap: total.l2_gap,
        cosine: total.cosine,
        theta,
        weight: bucket_stat("weight"),
        bias: bucket_stat("bias"),
        per_segment,
        jacobian_variance_estimate,
        jacobian_correlation,
        theta_note,
        true_loss,
        attack_loss,
    })
}

/// Standalone-layer mismatch of the modulation-parameter gradient: both
/// sides fit the same regression targets through the layer, one holding
/// the true key and one the substituted key.
pub fn layer_theta_mismatch(
    layer: &InrLinearLayer,
    true_key: &PermutationKey,
    attack_key: &PermutationKey,
    xs: &[Vector],
    targets: &[Vector],
) -> Result<GapStat> {
    if xs.is_empty() || xs.len() != targets.len() {
        return Err(Error::invalid(
            "layer mismatch",
            format!("{} inputs vs {} targets", xs.len(), targets.len()),
        ));
    }
    let theta_grad = |key: &PermutationKey| -> Result<Vec<f64>> {
        let mut upstreams = Vec::with_capacity(xs.len());
        for (x, t) in xs.iter().zip(targets) {
            let y = layer.forward(x, key)?;
            let (_, grad) = mse_with_grad(&y, t)?;
            upstreams.push(grad);
        }
        let grads = layer.backward_batch(xs, &upstreams, key)?;
        Ok(grads.d_theta.flatten())
    };
    let g_true = theta_grad(true_key)?;
    let g_attack = theta_grad(attack_key)?;
    Ok(gap_stat(&g_true, &g_attack))
}
