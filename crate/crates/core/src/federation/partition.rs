//! Dataset partitioning across clients and per-round client selection.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::sampling::sample_dirichlet;

/// Splits `0..n` into `k` disjoint shards of near-equal size (any two
/// shard sizes differ by at most one) in shuffled order.
pub fn partition_iid(n: usize, k: usize, stream: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("partition", "need at least one client"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut order);
    let mut shards = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, idx) in order.into_iter().enumerate() {
        shards[pos % k].push(idx);
    }
    Ok(shards)
}

/// Splits samples into `k` shards with per-class proportions drawn from a
/// symmetric Dirichlet: small `alpha` concentrates each class on few
/// clients, large `alpha` approaches a uniform split. Whole-partition
/// redraws (at most 100) guarantee no client ends up empty.
pub fn partition_dirichlet(
    labels: &[usize],
    k: usize,
    alpha: f64,
    stream: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("partition", "need at least one client"));
    }
    if labels.len() < k {
        return Err(Error::invalid(
            "partition",
            format!("{} samples cannot cover {k} clients", labels.len()),
        ));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid("partition", format!("alpha {alpha} must be positive")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    for _attempt in 0..100 {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
        for members in by_class.values() {
            let mut members = members.clone();
            stream.shuffle(&mut members);
            let proportions = sample_dirichlet(stream, alpha, k)?;
            let counts = largest_remainder(&proportions, members.len());
            let mut cursor = 0;
            for (shard, &count) in shards.iter_mut().zip(&counts) {
                shard.extend_from_slice(&members[cursor..cursor + count]);
                cursor += count;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards);
        }
    }
    Err(Error::invalid(
        "partition",
        "could not produce non-empty shards in 100 attempts; raise alpha or lower the client count",
    ))
}

/// Apportions `total` items proportionally to `weights`, flooring each
/// share and granting the leftovers to the largest fractional parts
/// (ties resolved toward lower indices).
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let exact = w * total as f64;
        let base = exact.floor() as usize;
        counts.push(base);
        assigned += base;
        fracs.push((i, exact - base as f64));
    }
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in fracs.into_iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws `ceil(fraction * n_clients)` distinct client ids, returned in
/// ascending order.
pub fn select_clients(n_clients: usize, fraction: f64, stream: &mut RngStream) -> Result<Vec<usize>> {
    if n_clients == 0 {
        return Err(Error::invalid("selection", "need at least one client"));
    }
    if !(fraction.is_finite() && fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("selection", format!("fraction {fraction} not in (0, 1]")));
    }
    let m = ((fraction * n_clients as f64).ceil() as usize).clamp(1, n_clients);
    let mut pool: Vec<usize> = (0..n_clients).collect();
    for i in 0..m {
        let j = i + stream.next_index(n_clients - i);
        pool.swap(i, j);
    }
    let mut chosen = pool[..m].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}
