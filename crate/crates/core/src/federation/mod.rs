//! Federated averaging over the models in this crate.
//!
//! One run proceeds in rounds: the server snapshots the global parameters,
//! a subset of clients trains locally from that snapshot, and the server
//! replaces the global parameters with the mean of the results (for
//! sanitized methods: the mean of clipped, noised deltas added back onto
//! the snapshot). Every random decision is drawn from a stream derived
//! from the run seed and a fixed purpose tag, so a run is reproducible
//! from its seed alone and identical whether clients execute sequentially
//! or in parallel.

pub mod dp;
pub mod partition;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inr_lock::{KeySet, PermutationKey};
use crate::model::params::ParamVector;
use crate::model::{build_model, LockConfig, Model, ModelSpec, OptimizerKind, Target};
use crate::numerics::matrix::Vector;
use crate::numerics::rng::{derive_stream, RngStream};

pub use dp::{add_gaussian_noise, clip_to_norm, dp_sanitize, DpConfig};
pub use partition::{partition_dirichlet, partition_iid, select_clients};

/// Purpose tags for seed-derived streams; the first path element of every
/// stream a run draws from. Fixed forever: they are the determinism
/// contract that lets an external loop reproduce any part of a run.
pub mod stream_tags {
    /// Dataset partitioning.
    pub const PARTITION: u64 = 1;
    /// Locked-layer keys, one child per locked layer index.
    pub const KEYS: u64 = 2;
    /// Global model initialization.
    pub const INIT: u64 = 3;
    /// Adapter initialization, one child per decoder layer index.
    pub const LORA: u64 = 4;
    /// Per-round client selection, one child per round.
    pub const SELECT: u64 = 5;
    /// Local training, one child per (round, client).
    pub const LOCAL: u64 = 6;
    /// Update sanitization noise, one child per (round, client).
    pub const DP: u64 = 7;
}

/// Training method. `fl` is plain federated averaging; `fl_dp` adds
/// update sanitization; `fl_lora_dp` freezes decoder bases and trains
/// sanitized low-rank adapters; `infl` trains key-locked decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fl,
    FlDp,
    FlLoraDp,
    Infl,
}

impl Method {
    pub fn uses_dp(self) -> bool {
        matches!(self, Method::FlDp | Method::FlLoraDp)
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, Method::FlLoraDp)
    }

    pub fn uses_lock(self) -> bool {
        matches!(self, Method::Infl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Fl => "fl",
            Method::FlDp => "fl_dp",
            Method::FlLoraDp => "fl_lora_dp",
            Method::Infl => "infl",
        }
    }
}

/// How the training set is spread across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub method: Method,
    pub n_clients: usize,
    /// Fraction of clients selected each round, in (0, 1].
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Optimizer built fresh for every local training pass.
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub partition: PartitionScheme,
    pub dp: DpConfig,
    pub lora_rank: usize,
    pub lora_scaling: f64,
    pub seed: u64,
    /// Run the selected clients of each round on a thread pool. Results
    /// are aggregated in client-id order either way, so this never
    /// changes any output bit. Excluded from serialized echoes: it is a
    /// scheduling knob, not part of a run's identity, and artifacts must
    /// come out byte-identical however the clients were scheduled.
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for FederationConfig {
    fn default() -> FederationConfig {
        FederationConfig {
            method: Method::Fl,
            n_clients: 5,
            participation: 1.0,
            rounds: 50,
            local_epochs: 2,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            partition: PartitionScheme::Iid,
            dp: DpConfig::default(),
            lora_rank: 4,
            lora_scaling: 1.0,
            seed: 0,
            parallel: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::invalid("n_clients", "need at least one client"));
        }
        if !(self.participation.is_finite() && self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::invalid(
                "participation",
                format!("{} not in (0, 1]", self.participation),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr", format!("{} must be positive", self.lr)));
        }
        if let PartitionScheme::Dirichlet { alpha } = self.partition {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::invalid("alpha", format!("{alpha} must be positive")));
            }
        }
        if self.method.uses_dp() {
            self.dp.validate()?;
        }
        if self.method.uses_lora() && self.lora_rank == 0 {
            return Err(Error::invalid("lora_rank", "must be at least 1"));
        }
        Ok(())
    }
}

/// Result of one client's local pass.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    /// Trainable parameters after local training (the starting snapshot
    /// if the pass was skipped).
    pub params: ParamVector,
    /// Mean training loss over all local optimizer steps.
    pub mean_loss: f64,
    pub steps: usize,
    /// True when the shard was empty or no epochs were requested; the
    /// parameters are then bit-identical to the snapshot.
    pub skipped: bool,
}

/// Trains a copy of `model` on the shard rows `indices` for `epochs`
/// passes with a fresh optimizer state, drawing epoch shuffles from
/// `stream.child(0).child(epoch)` and dropout from `stream.child(1)`.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    model: &Model,
    keys: &KeySet,
    xs: &[Vector],
    targets: &[Target],
    indices: &[usize],
    epochs: usize,
    batch_size: usize,
    optimizer: OptimizerKind,
    lr: f64,
    stream: &RngStream,
) -> Result<LocalOutcome> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    if indices.is_empty() || epochs == 0 {
        return Ok(LocalOutcome { params: model.params(), mean_loss: 0.0, steps: 0, skipped: true });
    }
    let mut local = model.clone();
    let mut params = local.params();
    let mut opt = optimizer.build(&params, lr);
    let mut dropout = stream.child(1);
    let mut order = indices.to_vec();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for epoch in 0..epochs {
        let mut shuffle = stream.child(0).child(epoch as u64);
        shuffle.shuffle(&mut order);
        for batch in order.chunks(batch_size) {
            let bx: Vec<Vector> = batch.iter().map(|&i| xs[i].clone()).collect();
            let bt: Vec<Target> = batch.iter().map(|&i| targets[i].clone()).collect();
            let (loss, grads) = local.backward(&bx, &bt, keys, Some(&mut dropout))?;
            opt.step(&mut params, &grads)?;
            local.set_params(&params)?;
            loss_sum += loss;
            steps += 1;
        }
    }
    Ok(LocalOutcome { params, mean_loss: loss_sum / steps as f64, steps, skipped: false })
}

/// Unweighted mean of client parameter vectors. All inputs must share one
/// layout; the error names the first segment that differs.
pub fn fedavg_aggregate(locals: &[ParamVector]) -> Result<ParamVector> {
    ParamVector::mean(locals)
}

/// The shard map a run with this configuration would use, derived only
/// from the seed's partition stream, the scheme, and the training
/// targets. `run_federation` calls this, so inspecting shards through it
/// sees exactly the training split.
pub fn make_shards(cfg: &FederationConfig, train_t: &[Target]) -> Result<Vec<Vec<usize>>> {
    let mut part_stream = derive_stream(cfg.seed, &[stream_tags::PARTITION]);
    match cfg.partition {
        PartitionScheme::Iid => partition_iid(train_t.len(), cfg.n_clients, &mut part_stream),
        PartitionScheme::Dirichlet { alpha } => {
            let labels = train_t
                .iter()
                .map(|t| match t {
                    Target::Class(c) => Ok(*c),
                    Target::Values(_) => {
                        Err(Error::invalid("partition", "label-skewed splits need class targets"))
                    }
                })
                .collect::<Result<Vec<usize>>>()?;
            partition_dirichlet(&labels, cfg.n_clients, alpha, &mut part_stream)
        }
    }
}

/// Per-round log line. `wall_ms` is the only non-deterministic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub mean_local_loss: f64,
    pub global_loss: f64,
    pub global_accuracy: Option<f64>,
    pub wall_ms: u64,
    pub skipped_clients: Vec<usize>,
}

impl RoundRecord {
    /// Everything except wall time, for determinism comparisons.
    pub fn deterministic_view(&self) -> (usize, &[usize], f64, f64, Option<f64>, &[usize]) {
        (
            self.round,
            &self.selected,
            self.mean_local_loss,
            self.global_loss,
            self.global_accuracy,
            &self.skipped_clients,
        )
    }
}

/// A finished run: the trained global model, the key set it is bound to
/// (empty for unlocked methods), the per-round log, and the shard map.
#[derive(Debug, Clone)]
pub struct FederationRun {
    pub model: Model,
    pub keys: KeySet,
    pub rounds: Vec<RoundRecord>,
    pub shards: Vec<Vec<usize>>,
}

/// Runs federated training end to end. The caller's `spec` decides which
/// decoder layers are locked when the method uses the lock; for other
/// methods the lock list is cleared so architectures stay comparable.
/// Keys are derived from the seed's key stream by layer index only —
/// every client of a run holds the same key set, and keys never enter the
/// aggregation path.
pub fn run_federation(
    spec: &ModelSpec,
    lock: &LockConfig,
    cfg: &FederationConfig,
    train_x: &[Vector],
    train_t: &[Target],
    eval_x: &[Vector],
    eval_t: &[Target],
) -> Result<FederationRun> {
    cfg.validate()?;
    lock.validate()?;
    let mut spec = spec.clone();
    if cfg.method.uses_lock() {
        if spec.locked_layers.is_empty() {
            return Err(Error::invalid("locked_layers", "this method needs at least one locked layer"));
        }
    } else {
        spec.locked_layers.clear();
    }
    spec.validate()?;
    if train_x.is_empty() || train_x.len() != train_t.len() {
        return Err(Error::invalid(
            "training data",
            format!("{} inputs vs {} targets", train_x.len(), train_t.len()),
        ));
    }
    if eval_x.is_empty() || eval_x.len() != eval_t.len() {
        return Err(Error::invalid(
            "evaluation data",
            format!("{} inputs vs {} targets", eval_x.len(), eval_t.len()),
        ));
    }

    let shards = make_shards(cfg, train_t)?;

    let mut global = build_model(&spec, lock, &derive_stream(cfg.seed, &[stream_tags::INIT]))?;

    let mut keys = KeySet::new();
    for (li, name) in global.locked_layer_names().into_iter().enumerate() {
        let n_out = global.locked_layer(&name).expect("locked name resolves").n_out();
        let mut key_stream = derive_stream(cfg.seed, &[stream_tags::KEYS, li as u64]);
        keys.insert(name, PermutationKey::generate(n_out, &mut key_stream)?);
    }
    global.bind_keys(&keys)?;

    if cfg.method.uses_lora() {
        for (li, name) in ["dec0", "dec1"].into_iter().enumerate() {
            let mut lora_stream = derive_stream(cfg.seed, &[stream_tags::LORA, li as u64]);
            global.attach_lora(name, cfg.lora_rank, cfg.lora_scaling, &mut lora_stream)?;
        }
    }

    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let started = Instant::now();
        let mut sel_stream = derive_stream(cfg.seed, &[stream_tags::SELECT, round as u64]);
        let selected = select_clients(cfg.n_clients, cfg.participation, &mut sel_stream)?;

        let run_client = |&client: &usize| -> Result<LocalOutcome> {
            let stream = derive_stream(cfg.seed, &[stream_tags::LOCAL, round as u64, client as u64]);
            local_train(
                &global,
                &keys,
                train_x,
                train_t,
                &shards[client],
                cfg.local_epochs,
                cfg.batch_size,
                cfg.optimizer,
                cfg.lr,
                &stream,
            )
        };
        let outcomes: Vec<LocalOutcome> = if cfg.parallel {
            selected.par_iter().map(run_client).collect::<Result<Vec<_>>>()?
        } else {
            selected.iter().map(run_client).collect::<Result<Vec<_>>>()?
        };

        let snapshot = global.params();
        let new_params = if cfg.method.uses_dp() {
            let mut deltas = Vec::with_capacity(outcomes.len());
            for (outcome, &client) in outcomes.iter().zip(&selected) {
                let mut delta = outcome.params.sub(&snapshot)?;
                let mut dp_stream =
                    derive_stream(cfg.seed, &[stream_tags::DP, round as u64, client as u64]);
                dp_sanitize(&mut delta, &cfg.dp, &mut dp_stream);
                deltas.push(delta);
            }
            let mean_delta = fedavg_aggregate(&deltas)?;
            let mut next = snapshot.clone();
            next.add_assign_scaled(&mean_delta, 1.0)?;
            next
        } else {
            let locals: Vec<ParamVector> = outcomes.iter().map(|o| o.params.clone()).collect();
            fedavg_aggregate(&locals)?
        };
        global.set_params(&new_params)?;

        let trained: Vec<&LocalOutcome> = outcomes.iter().filter(|o| !o.skipped).collect();
        let mean_local_loss = if trained.is_empty() {
            f64::NAN
        } else {
            trained.iter().map(|o| o.mean_loss).sum::<f64>() / trained.len() as f64
        };
        let skipped_clients: Vec<usize> = outcomes
            .iter()
            .zip(&selected)
            .filter(|(o, _)| o.skipped)
            .map(|(_, &c)| c)
            .collect();

        let metrics = global.evaluate(eval_x, eval_t, &keys)?;
        rounds.push(RoundRecord {
            round,
            selected,
            mean_local_loss,
            global_loss: metrics.loss,
            global_accuracy: metrics.accuracy,
            wall_ms: started.elapsed().as_millis() as u64,
            skipped_clients,
        });
    }

    Ok(FederationRun { model: global, keys, rounds, shards })
}
