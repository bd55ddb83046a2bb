//! End-to-end experiment runs: train, attack, verify, partition.
//!
//! Each runner owns its artifact layout under one output directory and
//! writes every file atomically. Training emits a checkpoint, one key
//! file per client, a per-round CSV log, and a JSON summary; attacking a
//! checkpoint emits a JSON + CSV scorecard next to it; partitioning emits
//! a shard manifest produced by the exact code path training uses.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::write_atomic;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::ExperimentConfig;
use crate::data::{make_dataset, SyntheticDataset};
use crate::error::{Error, Result};
use crate::federation::{make_shards, run_federation, FederationRun, PartitionScheme};
use crate::inr_lock::{Activation, InrInit, InrLinearLayer, KeySet, PermutationKey};
use crate::model::{metrics, Target, Task};
use crate::numerics::matrix::Vector;
use crate::numerics::rng::{derive_stream, RngStream};
use crate::threatlab::{
    attack_key_set, layer_theta_mismatch, random_key_error_stats, run_attack_suite,
    strip_error_stats, wrong_key_error_stats, AttackKind, AttackReport, AttackSuiteConfig,
};

/// Joins the configured output directory onto an optional root override.
/// With an override in force, absolute output directories are refused:
/// the override exists to confine writes, so a path that escapes it is an
/// error rather than silently honored.
pub fn resolve_out_dir(output_dir: &str, out_root: Option<&Path>) -> Result<PathBuf> {
    if output_dir.is_empty() {
        return Err(Error::invalid("output_dir", "must not be empty"));
    }
    match out_root {
        None => Ok(PathBuf::from(output_dir)),
        Some(root) => {
            if Path::new(output_dir).is_absolute() {
                return Err(Error::invalid(
                    "output_dir",
                    format!("{output_dir} is absolute and cannot go under the output root"),
                ));
            }
            Ok(root.join(output_dir))
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

/// One round of the summary, without wall time: the deterministic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRound {
    pub round: usize,
    pub selected: Vec<usize>,
    pub mean_local_loss: f64,
    pub global_loss: f64,
    pub global_accuracy: Option<f64>,
    pub skipped_clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub method: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub key_fingerprints: BTreeMap<String, String>,
    pub rounds: Vec<SummaryRound>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPaths {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub rounds_csv: PathBuf,
    pub summary_json: PathBuf,
    pub key_files: Vec<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub paths: TrainPaths,
    pub summary: RunSummary,
    pub run: FederationRun,
}

/// Effective federation settings: one experiment seed rules the dataset,
/// the shards, the keys, and the training streams.
fn effective_federation(cfg: &ExperimentConfig) -> crate::federation::FederationConfig {
    let mut fed = cfg.federation.clone();
    fed.seed = cfg.seed;
    fed
}

pub fn rounds_csv_text(rounds: &[crate::federation::RoundRecord]) -> String {
    let mut out = String::from("# schema=infl.rounds.v1\n");
    out.push_str("round,selected_ids,mean_local_loss,global_loss,global_accuracy,wall_ms\n");
    for r in rounds {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.round,
            join_ids(&r.selected),
            r.mean_local_loss,
            r.global_loss,
            fmt_opt(r.global_accuracy),
            r.wall_ms,
        ));
    }
    out
}

/// Trains per the configuration and writes all run artifacts:
/// `checkpoint.bin`, `rounds.csv`, `summary.json`, and — when the method
/// locks layers — `keys/client_{k}.keys`, one per client. Every client
/// of a consortium holds the same key set, so the files differ only in
/// name; they are never bundled into the checkpoint.
pub fn run_train(cfg: &ExperimentConfig, out_root: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = resolve_out_dir(&cfg.output_dir, out_root)?;
    let fed = effective_federation(cfg);
    let ds = make_dataset(&cfg.data.descriptor(), cfg.seed)?;
    let run = run_federation(
        &cfg.model,
        &cfg.lock,
        &fed,
        &ds.train_xs,
        &ds.train_targets,
        &ds.eval_xs,
        &ds.eval_targets,
    )?;

    let checkpoint = out_dir.join("checkpoint.bin");
    let meta = CheckpointMeta { data: cfg.data.descriptor(), federation: fed.clone(), seed: cfg.seed };
    save_checkpoint(&run.model, &meta, &checkpoint)?;

    let mut key_files = Vec::new();
    if !run.keys.is_empty() {
        for k in 0..fed.n_clients {
            let path = out_dir.join("keys").join(format!("client_{k:02}.keys"));
            run.keys.save(&path)?;
            key_files.push(path);
        }
    }

    let rounds_csv = out_dir.join("rounds.csv");
    write_atomic(&rounds_csv, rounds_csv_text(&run.rounds).as_bytes())?;

    let last = run.rounds.last().ok_or_else(|| Error::invalid("training", "no rounds ran"))?;
    let summary = RunSummary {
        schema: "infl.summary.v1".into(),
        method: fed.method.name().into(),
        seed: cfg.seed,
        config: cfg.clone(),
        final_loss: last.global_loss,
        final_accuracy: last.global_accuracy,
        key_fingerprints: run.model.expected_fingerprints(),
        rounds: run
            .rounds
            .iter()
            .map(|r| SummaryRound {
                round: r.round,
                selected: r.selected.clone(),
                mean_local_loss: r.mean_local_loss,
                global_loss: r.global_loss,
                global_accuracy: r.global_accuracy,
                skipped_clients: r.skipped_clients.clone(),
            })
            .collect(),
    };
    let summary_json = out_dir.join("summary.json");
    write_atomic(&summary_json, &to_pretty_json(&summary)?)?;

    Ok(TrainOutcome {
        paths: TrainPaths { out_dir, checkpoint, rounds_csv, summary_json, key_files },
        summary,
        run,
    })
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::decode("artifact", format!("serialize: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Scorecard entry for an adversary evaluated without the true keys on
/// hand: output metrics only, since error statistics and gradient
/// comparisons need the authorized reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeylessRecord {
    pub kind: AttackKind,
    pub attacked_loss: f64,
    pub attacked_accuracy: Option<f64>,
    pub attack_key_fingerprints: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackArtifact {
    pub schema: String,
    /// "full" when the true key files were supplied, otherwise "keyless".
    pub mode: String,
    pub seed: u64,
    pub eval_size: usize,
    pub reports: Vec<AttackReport>,
    pub keyless: Vec<KeylessRecord>,
}

#[derive(Debug)]
pub struct AttackOutcome {
    pub json_path: PathBuf,
    pub csv_path: PathBuf,
    pub artifact: AttackArtifact,
}

#[derive(Debug, Clone)]
pub struct AttackOptions {
    pub kinds: Vec<AttackKind>,
    pub n_error_trials: usize,
    pub grad_batch: usize,
}

impl Default for AttackOptions {
    fn default() -> AttackOptions {
        let d = AttackSuiteConfig::default();
        AttackOptions { kinds: d.kinds, n_error_trials: d.n_error_trials, grad_batch: d.grad_batch }
    }
}

/// Picks the key file: a `.keys` path is used directly; a directory is
/// searched for `*.keys` files and the lexicographically first one wins
/// (every client file of a run holds the same key set).
fn resolve_key_file(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        let mut candidates: Vec<PathBuf> = std::fs::read_dir(path)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "keys"))
            .collect();
        candidates.sort();
        candidates
            .into_iter()
            .next()
            .ok_or_else(|| Error::invalid("keys", format!("no .keys files in {}", path.display())))
    } else {
        Ok(path.to_path_buf())
    }
}

fn attacks_csv_text(artifact: &AttackArtifact) -> String {
    let mut out = String::from("# schema=infl.attacks.v1\n");
    out.push_str(
        "kind,authorized_loss,authorized_accuracy,attacked_loss,attacked_accuracy,grad_l2_gap,grad_cosine\n",
    );
    for r in &artifact.reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.kind.name(),
            r.authorized_loss,
            fmt_opt(r.authorized_accuracy),
            r.attacked_loss,
            fmt_opt(r.attacked_accuracy),
            fmt_opt(r.grad_mismatch.as_ref().map(|g| g.l2_gap)),
            fmt_opt(r.grad_mismatch.as_ref().and_then(|g| g.cosine)),
        ));
    }
    for r in &artifact.keyless {
        out.push_str(&format!(
            "{},,,{},{},,\n",
            r.kind.name(),
            r.attacked_loss,
            fmt_opt(r.attacked_accuracy),
        ));
    }
    out
}

/// Evaluates the configured adversaries against a trained checkpoint and
/// writes `attacks.json` + `attacks.csv` next to it. The evaluation split
/// is regenerated from the data descriptor and seed stored in the
/// checkpoint, so the attack needs no other inputs. With `keys` given
/// (file or directory), the full scorecard runs — and a key set whose
/// fingerprints don't match the checkpoint is refused before anything is
/// evaluated. Without keys, only attacked outputs can be scored.
pub fn run_attack(
    checkpoint_path: &Path,
    keys: Option<&Path>,
    opts: &AttackOptions,
) -> Result<AttackOutcome> {
    if opts.kinds.is_empty() {
        return Err(Error::invalid("attack", "no attack kinds configured"));
    }
    let loaded = load_checkpoint(checkpoint_path)?;
    let ds = make_dataset(&loaded.meta.data, loaded.meta.seed)?;
    let (xs, targets) = (&ds.eval_xs, &ds.eval_targets);
    let seed = loaded.meta.seed;

    let artifact = match keys {
        Some(key_path) => {
            let key_set = KeySet::load(&resolve_key_file(key_path)?)?;
            let suite = AttackSuiteConfig {
                kinds: opts.kinds.clone(),
                n_error_trials: opts.n_error_trials,
                grad_batch: opts.grad_batch,
                seed,
            };
            let reports = run_attack_suite(&loaded.model, &key_set, xs, targets, &suite)?;
            AttackArtifact {
                schema: "infl.attacks.v1".into(),
                mode: "full".into(),
                seed,
                eval_size: xs.len(),
                reports,
                keyless: Vec::new(),
            }
        }
        None => {
            let mut records = Vec::with_capacity(opts.kinds.len());
            for &kind in &opts.kinds {
                // Same derivation as the full suite, so both modes see
                // the adversary draw identical keys.
                let root = derive_stream(seed, &[kind.stream_tag()]);
                let attack_keys = match kind {
                    AttackKind::StripInr => None,
                    _ => Some(attack_key_set(&loaded.model, kind, &mut root.child(1))?),
                };
                let outputs = match &attack_keys {
                    None => loaded.model.forward_batch_stripped(xs)?,
                    Some(k) => loaded.model.forward_batch_unchecked(xs, k)?,
                };
                let m = metrics(&outputs, targets, loaded.model.task())?;
                records.push(KeylessRecord {
                    kind,
                    attacked_loss: m.loss,
                    attacked_accuracy: m.accuracy,
                    attack_key_fingerprints: attack_keys.as_ref().map(KeySet::fingerprints),
                });
            }
            AttackArtifact {
                schema: "infl.attacks.v1".into(),
                mode: "keyless".into(),
                seed,
                eval_size: xs.len(),
                reports: Vec::new(),
                keyless: records,
            }
        }
    };

    let dir = checkpoint_path.parent().unwrap_or_else(|| Path::new("."));
    let json_path = dir.join("attacks.json");
    let csv_path = dir.join("attacks.csv");
    write_atomic(&json_path, &to_pretty_json(&artifact)?)?;
    write_atomic(&csv_path, attacks_csv_text(&artifact).as_bytes())?;
    Ok(AttackOutcome { json_path, csv_path, artifact })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "check")]
pub enum VerifyCheck {
    /// |observed - expected| must be at most `tolerance` (times
    /// |expected| when `relative`).
    Within { expected: f64, tolerance: f64, relative: bool },
    /// observed must be at most `limit`.
    AtMost { limit: f64 },
    /// observed must be strictly greater than zero.
    StrictlyPositive,
}

impl VerifyCheck {
    pub fn passes(&self, observed: f64) -> bool {
        if !observed.is_finite() {
            return false;
        }
        match *self {
            VerifyCheck::Within { expected, tolerance, relative } => {
                let scale = if relative { expected.abs() } else { 1.0 };
                (observed - expected).abs() <= tolerance * scale
            }
            VerifyCheck::AtMost { limit } => observed <= limit,
            VerifyCheck::StrictlyPositive => observed > 0.0,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            VerifyCheck::Within { expected, tolerance, relative } => {
                if relative {
                    format!("within {:.3}% of {expected}", tolerance * 100.0)
                } else {
                    format!("within {tolerance} of {expected}")
                }
            }
            VerifyCheck::AtMost { limit } => format!("at most {limit}"),
            VerifyCheck::StrictlyPositive => "strictly positive".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub name: String,
    pub observed: f64,
    pub check: VerifyCheck,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub alpha: f64,
    pub levels: usize,
    pub trials: usize,
    pub seed: u64,
    pub rows: Vec<VerifyRow>,
    pub all_pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub alpha: f64,
    pub levels: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> VerifyOptions {
        VerifyOptions { alpha: 0.5, levels: 6, trials: 20_000, seed: 7 }
    }
}

fn random_layer(
    n_in: usize,
    n_out: usize,
    alpha: f64,
    levels: usize,
    stream: &mut RngStream,
) -> Result<InrLinearLayer> {
    InrLinearLayer::new(n_in, n_out, alpha, levels, 8, 3, Activation::Relu, InrInit::FullRandom, stream)
}

fn probe_batch(n_in: usize, n: usize, stream: &mut RngStream) -> Vec<Vector> {
    (0..n)
        .map(|_| Vector::from_vec((0..n_in).map(|_| stream.next_normal()).collect()))
        .collect()
}

/// Max |(y_a - y_b)_i - (1-alpha)(delta[a(i)] - delta[b(i)])| over the
/// batch: the key-substitution output identity, measured from real
/// forwards against the canonical modulation table.
fn substitution_residual(
    layer: &InrLinearLayer,
    a: &PermutationKey,
    b: &PermutationKey,
    xs: &[Vector],
) -> Result<f64> {
    let scale = 1.0 - layer.alpha();
    let canon = layer.canonical_modulation()?;
    let mut worst = 0.0f64;
    for x in xs {
        let ya = layer.forward(x, a)?;
        let yb = layer.forward(x, b)?;
        for i in 0..layer.n_out() {
            let predicted = scale * (canon[a.as_slice()[i]] - canon[b.as_slice()[i]]);
            worst = worst.max(((ya[i] - yb[i]) - predicted).abs());
        }
    }
    Ok(worst)
}

/// Max |(y - y_stripped)_i - (1-alpha) delta[k(i)]| over the batch.
fn strip_residual(layer: &InrLinearLayer, key: &PermutationKey, xs: &[Vector]) -> Result<f64> {
    let scale = 1.0 - layer.alpha();
    let canon = layer.canonical_modulation()?;
    let mut worst = 0.0f64;
    for x in xs {
        let y = layer.forward(x, key)?;
        let stripped = layer.forward_stripped(x)?;
        for i in 0..layer.n_out() {
            let predicted = scale * canon[key.as_slice()[i]];
            worst = worst.max(((y[i] - stripped[i]) - predicted).abs());
        }
    }
    Ok(worst)
}

/// Checks the security analysis against freshly drawn locked layers:
/// exact output identities for key substitution and stripping, the
/// Monte-Carlo mean-square laws against their closed forms, and the
/// modulation-gradient gap behavior for matched vs mismatched keys.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(Error::invalid("alpha", format!("{} not in [0, 1]", opts.alpha)));
    }
    if opts.alpha >= 1.0 {
        return Err(Error::invalid(
            "alpha",
            "full blend leaves no modulation to analyze; use alpha < 1",
        ));
    }
    if opts.levels == 0 || opts.levels > crate::inr_lock::MAX_LEVELS {
        return Err(Error::invalid(
            "levels",
            format!("{} not in 1..={}", opts.levels, crate::inr_lock::MAX_LEVELS),
        ));
    }
    if opts.trials == 0 {
        return Err(Error::invalid("trials", "need at least one trial"));
    }

    let mut rows = Vec::new();
    let push = |rows: &mut Vec<VerifyRow>, name: &str, observed: f64, check: VerifyCheck| {
        rows.push(VerifyRow { name: name.into(), observed, check, pass: check.passes(observed) });
    };

    // Exact output identities over 20 random layers of varied width.
    let mut worst_sub = 0.0f64;
    let mut worst_strip = 0.0f64;
    for t in 0..20u64 {
        let mut s = derive_stream(opts.seed, &[1, t]);
        let n_in = 2 + (t as usize % 5);
        let n_out = 3 + (t as usize * 7) % 30;
        let layer = random_layer(n_in, n_out, opts.alpha, opts.levels, &mut s)?;
        let key_a = PermutationKey::generate(n_out, &mut s)?;
        let key_b = PermutationKey::generate(n_out, &mut s)?;
        let xs = probe_batch(n_in, 4, &mut s);
        worst_sub = worst_sub.max(substitution_residual(&layer, &key_a, &key_b, &xs)?);
        worst_strip = worst_strip.max(strip_residual(&layer, &key_a, &xs)?);
    }
    push(
        &mut rows,
        "key-substitution output identity, max residual over 20 layers",
        worst_sub,
        VerifyCheck::AtMost { limit: 1e-12 },
    );
    push(
        &mut rows,
        "strip output identity, max residual over 20 layers",
        worst_strip,
        VerifyCheck::AtMost { limit: 1e-12 },
    );

    // Monte-Carlo mean-square laws on one wide layer.
    let mut s = derive_stream(opts.seed, &[2]);
    let layer = random_layer(4, 128, opts.alpha, opts.levels, &mut s)?;
    let wrong = wrong_key_error_stats(&layer, None, opts.trials, &mut s)?;
    push(
        &mut rows,
        "identity-substitution mean-square error over closed form",
        wrong.mean_sq_error / wrong.analytic_bound,
        VerifyCheck::Within { expected: 1.0, tolerance: 0.05, relative: false },
    );
    let random = random_key_error_stats(&layer, None, opts.trials, &mut s)?;
    push(
        &mut rows,
        "random-substitution mean-square error over closed form",
        random.mean_sq_error / random.analytic_bound,
        VerifyCheck::Within { expected: 1.0, tolerance: 0.05, relative: false },
    );
    let strip = strip_error_stats(&layer, None, opts.trials, &mut s)?;
    let strip_exact =
        (1.0 - strip.alpha) * (1.0 - strip.alpha) * strip.sigma_delta_sq_uncentered;
    push(
        &mut rows,
        "strip mean-square error over exact second-moment form",
        strip.mean_sq_error / strip_exact,
        VerifyCheck::Within { expected: 1.0, tolerance: 1e-9, relative: false },
    );

    // Gradient gap behavior on a smaller layer.
    let mut s = derive_stream(opts.seed, &[3]);
    let layer = random_layer(3, 16, opts.alpha, opts.levels, &mut s)?;
    let xs = probe_batch(3, 8, &mut s);
    let targets = probe_batch(16, 8, &mut s);
    let key = PermutationKey::generate(16, &mut s)?;
    let same = layer_theta_mismatch(&layer, &key, &key, &xs, &targets)?;
    push(
        &mut rows,
        "matched keys, modulation-gradient gap",
        same.l2_gap,
        VerifyCheck::AtMost { limit: 1e-12 },
    );
    let mut min_gap = f64::INFINITY;
    for _ in 0..5 {
        let a = PermutationKey::generate(16, &mut s)?;
        let mut b = PermutationKey::generate(16, &mut s)?;
        while b.fingerprint() == a.fingerprint() {
            b = PermutationKey::generate(16, &mut s)?;
        }
        min_gap = min_gap.min(layer_theta_mismatch(&layer, &a, &b, &xs, &targets)?.l2_gap);
    }
    push(
        &mut rows,
        "mismatched keys, smallest modulation-gradient gap of 5",
        min_gap,
        VerifyCheck::StrictlyPositive,
    );

    let all_pass = rows.iter().all(|r| r.pass);
    Ok(VerifyReport {
        alpha: opts.alpha,
        levels: opts.levels,
        trials: opts.trials,
        seed: opts.seed,
        rows,
        all_pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub schema: String,
    pub scheme: PartitionScheme,
    pub n_clients: usize,
    pub seed: u64,
    pub n_train: usize,
    pub sizes: Vec<usize>,
    /// Per client, per class: how many training samples. Classification
    /// only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_histograms: Option<Vec<Vec<usize>>>,
    pub shards: Vec<Vec<usize>>,
}

#[derive(Debug)]
pub struct PartitionOutcome {
    pub path: PathBuf,
    pub manifest: ShardManifest,
}

fn label_histograms(
    shards: &[Vec<usize>],
    targets: &[Target],
    n_classes: usize,
) -> Option<Vec<Vec<usize>>> {
    let mut hists = Vec::with_capacity(shards.len());
    for shard in shards {
        let mut h = vec![0usize; n_classes];
        for &i in shard {
            match targets[i] {
                Target::Class(c) if c < n_classes => h[c] += 1,
                _ => return None,
            }
        }
        hists.push(h);
    }
    Some(hists)
}

/// Computes the client shards training would use — same dataset, same
/// partition stream — and writes `shards.json` in the output directory.
pub fn run_partition(cfg: &ExperimentConfig, out_root: Option<&Path>) -> Result<PartitionOutcome> {
    cfg.validate()?;
    let out_dir = resolve_out_dir(&cfg.output_dir, out_root)?;
    let fed = effective_federation(cfg);
    let ds = make_dataset(&cfg.data.descriptor(), cfg.seed)?;
    let shards = make_shards(&fed, &ds.train_targets)?;
    let hists = match cfg.data.task {
        Task::Classification => {
            label_histograms(&shards, &ds.train_targets, cfg.data.n_classes)
        }
        Task::Regression => None,
    };
    let manifest = ShardManifest {
        schema: "infl.shards.v1".into(),
        scheme: fed.partition,
        n_clients: fed.n_clients,
        seed: cfg.seed,
        n_train: ds.n_train(),
        sizes: shards.iter().map(Vec::len).collect(),
        label_histograms: hists,
        shards,
    };
    let path = out_dir.join("shards.json");
    write_atomic(&path, &to_pretty_json(&manifest)?)?;
    Ok(PartitionOutcome { path, manifest })
}

/// Regenerates the evaluation split a run was scored on.
pub fn eval_split(meta: &CheckpointMeta) -> Result<SyntheticDataset> {
    make_dataset(&meta.data, meta.seed)
}
