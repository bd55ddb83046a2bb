//! Trainable models: an embedding layer, optional residual blocks, and a
//! two-layer decoder whose linear layers can be key-locked or wrapped in
//! low-rank adapters.
//!
//! The decoder layers are addressed by the fixed names `dec0` (hidden) and
//! `dec1` (output). A locked decoder layer blends its affine output with a
//! key-conditioned modulation; forwarding such a model requires a key set
//! holding one permutation per locked layer. Checked entry points verify
//! key fingerprints against whatever the layers were bound to; the
//! `_unchecked` variants skip only that authorization comparison and exist
//! for the attack experiments.

pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inr_lock::{Activation, InrInit, InrLinearLayer, KeySet, LockedGrads, PermutationKey, MAX_LEVELS};
use crate::model::layers::{LoraGrads, LoraLinear, NormTrace, PlainGrads, PlainLinear, ResidualBlock};
use crate::model::loss::{cross_entropy_with_grad, mse_with_grad};
use crate::model::params::{ParamVector, SegmentShape};
use crate::numerics::matrix::{Matrix, Vector};
use crate::numerics::rng::RngStream;

pub use layers::LoraAdapter;
pub use optim::{sgd_step, AdamParams, AdamState, Optimizer, OptimizerKind};
pub use params::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

fn default_hidden_dim() -> usize {
    64
}
fn default_blocks() -> usize {
    2
}
fn default_decoder_hidden() -> usize {
    32
}

/// Architecture description; every dimension is a count of neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_blocks")]
    pub n_residual_blocks: usize,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: usize,
    pub output_dim: usize,
    /// Which decoder layers carry a lock; valid names are `dec0`, `dec1`.
    #[serde(default)]
    pub locked_layers: Vec<String>,
    #[serde(default)]
    pub dropout_rate: f64,
    pub task: Task,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(
                "dropout_rate",
                format!("{} not in [0, 1)", self.dropout_rate),
            ));
        }
        for (i, name) in self.locked_layers.iter().enumerate() {
            if name != "dec0" && name != "dec1" {
                return Err(Error::invalid(
                    "locked_layers",
                    format!("{name} is not a decoder layer (expected dec0 or dec1)"),
                ));
            }
            if self.locked_layers[..i].contains(name) {
                return Err(Error::invalid("locked_layers", format!("{name} listed twice")));
            }
        }
        Ok(())
    }

    pub fn is_locked(&self, layer: &str) -> bool {
        self.locked_layers.iter().any(|n| n == layer)
    }
}

fn default_alpha() -> f64 {
    0.5
}
fn default_levels() -> usize {
    6
}
fn default_inr_hidden() -> usize {
    8
}
fn default_inr_layers() -> usize {
    3
}

/// Locked-layer hyperparameters, shared by all locked layers of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_inr_hidden")]
    pub inr_hidden: usize,
    #[serde(default = "default_inr_layers")]
    pub inr_layers: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for LockConfig {
    fn default() -> LockConfig {
        LockConfig {
            alpha: default_alpha(),
            levels: default_levels(),
            inr_hidden: default_inr_hidden(),
            inr_layers: default_inr_layers(),
            activation: Activation::Relu,
        }
    }
}

impl LockConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", format!("{} not in [0, 1]", self.alpha)));
        }
        if self.levels == 0 || self.levels > MAX_LEVELS {
            return Err(Error::invalid(
                "levels",
                format!("{} not in 1..={MAX_LEVELS}", self.levels),
            ));
        }
        if self.inr_hidden == 0 {
            return Err(Error::invalid("inr_hidden", "must be at least 1"));
        }
        if self.inr_layers == 0 {
            return Err(Error::invalid("inr_layers", "must be at least 1"));
        }
        Ok(())
    }
}

/// One decoder slot: an ordinary linear map, a key-locked one, or a frozen
/// linear map with a trainable low-rank adapter.
#[derive(Debug, Clone, PartialEq)]
pub enum DecoderLayer {
    Plain(PlainLinear),
    Locked(InrLinearLayer),
    Lora(LoraLinear),
}

impl DecoderLayer {
    fn is_locked(&self) -> bool {
        matches!(self, DecoderLayer::Locked(_))
    }

    /// Forward with a precomputed modulation; a locked layer given no
    /// modulation runs stripped (base path only, scaled by its blend).
    fn forward(&self, x: &Vector, delta: Option<&Vector>) -> Result<Vector> {
        match self {
            DecoderLayer::Plain(l) => l.forward(x),
            DecoderLayer::Lora(l) => l.forward(x),
            DecoderLayer::Locked(l) => match delta {
                Some(d) => l.forward_with_modulation(x, d),
                None => l.forward_stripped(x),
            },
        }
    }

    fn backward_batch(
        &self,
        name: &str,
        xs: &[Vector],
        upstreams: &[Vector],
        key: Option<&PermutationKey>,
    ) -> Result<DecGrads> {
        match self {
            DecoderLayer::Plain(l) => Ok(DecGrads::Plain(l.backward_batch(xs, upstreams)?)),
            DecoderLayer::Lora(l) => Ok(DecGrads::Lora(l.backward_batch(xs, upstreams)?)),
            DecoderLayer::Locked(l) => {
                let key = key.ok_or_else(|| Error::KeyMismatch {
                    detail: format!("key required for locked layer {name}"),
                })?;
                Ok(DecGrads::Locked(l.backward_batch(xs, upstreams, key)?))
            }
        }
    }

    fn push_params(&self, prefix: &str, pv: &mut ParamVector, full: bool) -> Result<()> {
        match self {
            DecoderLayer::Plain(l) => {
                push_matrix(pv, format!("{prefix}.w"), l.weight())?;
                push_vector(pv, format!("{prefix}.b"), l.bias())?;
            }
            DecoderLayer::Locked(l) => {
                push_matrix(pv, format!("{prefix}.w"), l.weight())?;
                push_vector(pv, format!("{prefix}.b"), l.bias())?;
                let theta = l.inr().theta_to_vec();
                let len = theta.len();
                pv.push(format!("{prefix}.inr"), SegmentShape::Vector { len }, theta)?;
            }
            DecoderLayer::Lora(l) => {
                if full {
                    push_matrix(pv, format!("{prefix}.w"), l.base().weight())?;
                }
                push_vector(pv, format!("{prefix}.b"), l.base().bias())?;
                push_matrix(pv, format!("{prefix}.lora.a"), l.adapter().a())?;
                push_matrix(pv, format!("{prefix}.lora.b"), l.adapter().b())?;
            }
        }
        Ok(())
    }

    /// Trainable-gradient segments, mirroring `push_params(full = false)`.
    fn push_grads(&self, prefix: &str, pv: &mut ParamVector, grads: &DecGrads) -> Result<()> {
        match grads {
            DecGrads::Plain(g) => {
                push_matrix(pv, format!("{prefix}.w"), &g.d_weight)?;
                push_vector(pv, format!("{prefix}.b"), &g.d_bias)?;
            }
            DecGrads::Locked(g) => {
                push_matrix(pv, format!("{prefix}.w"), &g.d_weight)?;
                push_vector(pv, format!("{prefix}.b"), &g.d_bias)?;
                let theta = g.d_theta.flatten();
                let len = theta.len();
                pv.push(format!("{prefix}.inr"), SegmentShape::Vector { len }, theta)?;
            }
            DecGrads::Lora(g) => {
                push_vector(pv, format!("{prefix}.b"), &g.d_bias)?;
                push_matrix(pv, format!("{prefix}.lora.a"), &g.d_a)?;
                push_matrix(pv, format!("{prefix}.lora.b"), &g.d_b)?;
            }
        }
        Ok(())
    }

    fn assign(&mut self, field: &str, values: &[f64]) -> Result<()> {
        match (self, field) {
            (DecoderLayer::Plain(l), "w") => l.weight.data_mut().copy_from_slice(values),
            (DecoderLayer::Plain(l), "b") => l.bias.as_mut_slice().copy_from_slice(values),
            (DecoderLayer::Locked(l), "w") => l.set_weight_from_slice(values)?,
            (DecoderLayer::Locked(l), "b") => l.set_bias_from_slice(values)?,
            (DecoderLayer::Locked(l), "inr") => l.set_theta_from_slice(values)?,
            (DecoderLayer::Lora(l), "w") => l.base.weight.data_mut().copy_from_slice(values),
            (DecoderLayer::Lora(l), "b") => l.base.bias.as_mut_slice().copy_from_slice(values),
            (DecoderLayer::Lora(l), "lora.a") => l.adapter.a.data_mut().copy_from_slice(values),
            (DecoderLayer::Lora(l), "lora.b") => l.adapter.b.data_mut().copy_from_slice(values),
            (_, other) => {
                return Err(Error::invalid("parameter segment", format!("decoder field {other}")))
            }
        }
        Ok(())
    }
}

enum DecGrads {
    Plain(PlainGrads),
    Locked(LockedGrads),
    Lora(LoraGrads),
}

impl DecGrads {
    fn d_inputs(&self) -> &[Vector] {
        match self {
            DecGrads::Plain(g) => &g.d_inputs,
            DecGrads::Locked(g) => &g.d_inputs,
            DecGrads::Lora(g) => &g.d_inputs,
        }
    }
}

fn push_matrix(pv: &mut ParamVector, name: String, m: &Matrix) -> Result<()> {
    pv.push(
        name,
        SegmentShape::Matrix { rows: m.rows(), cols: m.cols() },
        m.data().to_vec(),
    )
}

fn push_vector(pv: &mut ParamVector, name: String, v: &Vector) -> Result<()> {
    pv.push(name, SegmentShape::Vector { len: v.len() }, v.as_slice().to_vec())
}

fn relu_vec(v: &Vector) -> Vector {
    Vector::from_vec(v.as_slice().iter().map(|&x| x.max(0.0)).collect())
}

/// Per-example training target; must match the model's task.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vector),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    /// Fraction of correct argmax predictions; absent for regression.
    pub accuracy: Option<f64>,
}

fn argmax(v: &Vector) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Mean loss (and accuracy, for classification) over precomputed outputs.
pub fn metrics(outputs: &[Vector], targets: &[Target], task: Task) -> Result<EvalMetrics> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::invalid(
            "metrics",
            format!("{} outputs vs {} targets", outputs.len(), targets.len()),
        ));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (out, target) in outputs.iter().zip(targets) {
        match (task, target) {
            (Task::Classification, Target::Class(c)) => {
                loss += cross_entropy_with_grad(out, *c)?.0;
                if argmax(out) == *c {
                    correct += 1;
                }
            }
            (Task::Regression, Target::Values(t)) => {
                loss += mse_with_grad(out, t)?.0;
            }
            _ => {
                return Err(Error::invalid("metrics", "target kind does not match the task"));
            }
        }
    }
    let n = outputs.len() as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: match task {
            Task::Classification => Some(correct as f64 / n),
            Task::Regression => None,
        },
    })
}

/// Inverted-dropout mask: each entry is `0` (dropped) or `1/(1-rate)`.
/// A rate of zero draws nothing and returns no mask, so disabling dropout
/// leaves the random stream untouched.
fn draw_mask(len: usize, rate: f64, stream: &mut Option<&mut RngStream>) -> Option<Vector> {
    let stream = stream.as_deref_mut()?;
    if rate == 0.0 {
        return None;
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mut mask = Vector::zeros(len);
    for i in 0..len {
        mask[i] = if stream.next_f64() < rate { 0.0 } else { keep_scale };
    }
    Some(mask)
}

fn apply_mask(v: &mut Vector, mask: &Option<Vector>) {
    if let Some(m) = mask {
        for i in 0..v.len() {
            v[i] *= m[i];
        }
    }
}

struct TrainTrace {
    block_x: Vec<Vec<Vector>>,
    block_z1: Vec<Vec<Vector>>,
    block_drop: Vec<Vec<Option<Vector>>>,
    block_a1: Vec<Vec<Vector>>,
    block_norm: Vec<Vec<NormTrace>>,
    dec0_in: Vec<Vector>,
    dec0_pre: Vec<Vector>,
    dec_drop: Vec<Option<Vector>>,
    dec1_in: Vec<Vector>,
    outputs: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    lock: LockConfig,
    embed: PlainLinear,
    blocks: Vec<ResidualBlock>,
    dec0: DecoderLayer,
    dec1: DecoderLayer,
}

/// Builds a model from independent per-layer streams so that two specs
/// differing only in lock placement draw identical base weights: the
/// embedding uses child 1, residual block `i` uses child 2 then `i`, and
/// the decoder layers use children 3 and 4 of the given stream.
pub fn build_model(spec: &ModelSpec, lock: &LockConfig, stream: &RngStream) -> Result<Model> {
    spec.validate()?;
    lock.validate()?;
    let mut s_embed = stream.child(1);
    let embed = PlainLinear::new(spec.input_dim, spec.hidden_dim, &mut s_embed)?;
    let mut blocks = Vec::with_capacity(spec.n_residual_blocks);
    for i in 0..spec.n_residual_blocks {
        let mut sb = stream.child(2).child(i as u64);
        blocks.push(ResidualBlock::new(spec.hidden_dim, &mut sb)?);
    }
    let dec0 = build_decoder_layer(spec, lock, "dec0", spec.hidden_dim, spec.decoder_hidden, &mut stream.child(3))?;
    let dec1 = build_decoder_layer(spec, lock, "dec1", spec.decoder_hidden, spec.output_dim, &mut stream.child(4))?;
    Ok(Model { spec: spec.clone(), lock: lock.clone(), embed, blocks, dec0, dec1 })
}

fn build_decoder_layer(
    spec: &ModelSpec,
    lock: &LockConfig,
    name: &str,
    n_in: usize,
    n_out: usize,
    stream: &mut RngStream,
) -> Result<DecoderLayer> {
    if spec.is_locked(name) {
        // The modulation network is fully randomly initialized, like every
        // other layer. The key-conditioned offset pattern is therefore
        // present from the first forward pass, and training only has to
        // adapt around it: the base bias can absorb any offset, so there is
        // no pressure to unlearn the secret structure.
        Ok(DecoderLayer::Locked(InrLinearLayer::new(
            n_in,
            n_out,
            lock.alpha,
            lock.levels,
            lock.inr_hidden,
            lock.inr_layers,
            lock.activation,
            InrInit::FullRandom,
            stream,
        )?))
    } else {
        Ok(DecoderLayer::Plain(PlainLinear::new(n_in, n_out, stream)?))
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn lock_config(&self) -> &LockConfig {
        &self.lock
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn decoder(&self, name: &str) -> Option<&DecoderLayer> {
        match name {
            "dec0" => Some(&self.dec0),
            "dec1" => Some(&self.dec1),
            _ => None,
        }
    }

    pub fn locked_layer_names(&self) -> Vec<String> {
        ["dec0", "dec1"]
            .iter()
            .filter(|n| self.decoder(n).is_some_and(DecoderLayer::is_locked))
            .map(|n| n.to_string())
            .collect()
    }

    pub fn locked_layer(&self, name: &str) -> Option<&InrLinearLayer> {
        match self.decoder(name) {
            Some(DecoderLayer::Locked(l)) => Some(l),
            _ => None,
        }
    }

    pub fn has_locked_layers(&self) -> bool {
        !self.locked_layer_names().is_empty()
    }

    /// Records each key's fingerprint on its locked layer, making later
    /// checked forwards reject other keys. Requires a key per locked layer.
    pub fn bind_keys(&mut self, keys: &KeySet) -> Result<()> {
        for name in self.locked_layer_names() {
            let key = keys.get(&name).ok_or_else(|| Error::KeyMismatch {
                detail: format!("key required for locked layer {name}"),
            })?;
            let fp = key.fingerprint().to_string();
            match name.as_str() {
                "dec0" => {
                    if let DecoderLayer::Locked(l) = &mut self.dec0 {
                        l.bind_key(fp);
                    }
                }
                _ => {
                    if let DecoderLayer::Locked(l) = &mut self.dec1 {
                        l.bind_key(fp);
                    }
                }
            }
        }
        Ok(())
    }

    /// Restores key bindings from stored fingerprints (checkpoint load):
    /// each locked layer is marked as expecting its fingerprint without
    /// any key material being present. Every locked layer needs an entry,
    /// and entries for non-locked layers are rejected.
    pub fn bind_fingerprints(&mut self, fps: &BTreeMap<String, String>) -> Result<()> {
        let locked = self.locked_layer_names();
        for name in fps.keys() {
            if !locked.contains(name) {
                return Err(Error::KeyMismatch {
                    detail: format!("fingerprint given for {name}, which is not a locked layer"),
                });
            }
        }
        for name in locked {
            let fp = fps.get(&name).ok_or_else(|| Error::KeyMismatch {
                detail: format!("fingerprint required for locked layer {name}"),
            })?;
            match name.as_str() {
                "dec0" => {
                    if let DecoderLayer::Locked(l) = &mut self.dec0 {
                        l.bind_key(fp.clone());
                    }
                }
                _ => {
                    if let DecoderLayer::Locked(l) = &mut self.dec1 {
                        l.bind_key(fp.clone());
                    }
                }
            }
        }
        Ok(())
    }

    /// Fingerprints of the keys the locked layers were bound to.
    pub fn expected_fingerprints(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for name in self.locked_layer_names() {
            if let Some(l) = self.locked_layer(&name) {
                if let Some(fp) = l.key_id() {
                    out.insert(name.clone(), fp.to_string());
                }
            }
        }
        out
    }

    /// Replaces a plain decoder layer with a frozen-base + low-rank-adapter
    /// version. Locked layers cannot be adapted.
    pub fn attach_lora(&mut self, layer: &str, rank: usize, scaling: f64, stream: &mut RngStream) -> Result<()> {
        let slot = match layer {
            "dec0" => &mut self.dec0,
            "dec1" => &mut self.dec1,
            other => return Err(Error::invalid("adapter target", format!("{other} is not a decoder layer"))),
        };
        match slot {
            DecoderLayer::Plain(l) => {
                *slot = DecoderLayer::Lora(LoraLinear::wrap(l.clone(), rank, scaling, stream)?);
                Ok(())
            }
            DecoderLayer::Locked(_) => {
                Err(Error::invalid("adapter target", format!("{layer} is locked")))
            }
            DecoderLayer::Lora(_) => {
                Err(Error::invalid("adapter target", format!("{layer} already has an adapter")))
            }
        }
    }

    /// Verifies that `keys` holds a correctly-fingerprinted key for every
    /// locked layer.
    pub fn check_keys(&self, keys: &KeySet) -> Result<()> {
        for name in self.locked_layer_names() {
            let layer = self.locked_layer(&name).expect("locked name resolves");
            let key = keys.get(&name).ok_or_else(|| Error::KeyMismatch {
                detail: format!("key required for locked layer {name}"),
            })?;
            if let Some(expected) = layer.key_id() {
                if expected != key.fingerprint() {
                    return Err(Error::KeyMismatch {
                        detail: format!(
                            "locked layer {name} is bound to key {expected} but was given {}",
                            key.fingerprint()
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Modulations for the locked decoder slots, computed once per call.
    /// `keys == None` means stripped evaluation (no modulation at all).
    fn deltas(&self, keys: Option<&KeySet>) -> Result<(Option<Vector>, Option<Vector>)> {
        let one = |name: &str, slot: &DecoderLayer| -> Result<Option<Vector>> {
            match (slot, keys) {
                (DecoderLayer::Locked(l), Some(ks)) => {
                    let key = ks.get(name).ok_or_else(|| Error::KeyMismatch {
                        detail: format!("key required for locked layer {name}"),
                    })?;
                    Ok(Some(l.modulation(key)?))
                }
                _ => Ok(None),
            }
        };
        Ok((one("dec0", &self.dec0)?, one("dec1", &self.dec1)?))
    }

    fn forward_one(&self, x: &Vector, d0: Option<&Vector>, d1: Option<&Vector>) -> Result<Vector> {
        let mut cur = self.embed.forward(x)?;
        for block in &self.blocks {
            let z1 = block.fc1.forward(&cur)?;
            let a1 = relu_vec(&z1);
            let z2 = block.fc2.forward(&a1)?;
            let (normed, _) = block.norm.forward_traced(&z2)?;
            cur = cur.add(&normed)?;
        }
        let pre = self.dec0.forward(&cur, d0)?;
        let act = relu_vec(&pre);
        self.dec1.forward(&act, d1)
    }

    /// Authorized single-example forward (no dropout): requires a
    /// fingerprint-matching key per locked layer.
    pub fn forward(&self, x: &Vector, keys: &KeySet) -> Result<Vector> {
        self.check_keys(keys)?;
        let (d0, d1) = self.deltas(Some(keys))?;
        self.forward_one(x, d0.as_ref(), d1.as_ref())
    }

    pub fn forward_batch(&self, xs: &[Vector], keys: &KeySet) -> Result<Vec<Vector>> {
        self.check_keys(keys)?;
        self.forward_batch_unchecked(xs, keys)
    }

    /// Forward that accepts any size-compatible keys without comparing
    /// fingerprints — the substituted-key evaluation the attack lab uses.
    pub fn forward_batch_unchecked(&self, xs: &[Vector], keys: &KeySet) -> Result<Vec<Vector>> {
        let (d0, d1) = self.deltas(Some(keys))?;
        xs.iter().map(|x| self.forward_one(x, d0.as_ref(), d1.as_ref())).collect()
    }

    /// Forward with every locked layer's modulation removed: each locked
    /// layer contributes only its blend-scaled affine part.
    pub fn forward_batch_stripped(&self, xs: &[Vector]) -> Result<Vec<Vector>> {
        let (d0, d1) = self.deltas(None)?;
        xs.iter().map(|x| self.forward_one(x, d0.as_ref(), d1.as_ref())).collect()
    }

    pub fn evaluate(&self, xs: &[Vector], targets: &[Target], keys: &KeySet) -> Result<EvalMetrics> {
        let outputs = self.forward_batch(xs, keys)?;
        metrics(&outputs, targets, self.spec.task)
    }

    fn forward_traced(
        &self,
        xs: &[Vector],
        d0: Option<&Vector>,
        d1: Option<&Vector>,
        mut dropout: Option<&mut RngStream>,
    ) -> Result<TrainTrace> {
        let nb = self.blocks.len();
        let mut trace = TrainTrace {
            block_x: vec![Vec::with_capacity(xs.len()); nb],
            block_z1: vec![Vec::with_capacity(xs.len()); nb],
            block_drop: vec![Vec::with_capacity(xs.len()); nb],
            block_a1: vec![Vec::with_capacity(xs.len()); nb],
            block_norm: (0..nb).map(|_| Vec::with_capacity(xs.len())).collect(),
            dec0_in: Vec::with_capacity(xs.len()),
            dec0_pre: Vec::with_capacity(xs.len()),
            dec_drop: Vec::with_capacity(xs.len()),
            dec1_in: Vec::with_capacity(xs.len()),
            outputs: Vec::with_capacity(xs.len()),
        };
        let rate = self.spec.dropout_rate;
        for x in xs {
            let mut cur = self.embed.forward(x)?;
            for (bi, block) in self.blocks.iter().enumerate() {
                trace.block_x[bi].push(cur.clone());
                let z1 = block.fc1.forward(&cur)?;
                let mut a1 = relu_vec(&z1);
                let mask = draw_mask(a1.len(), rate, &mut dropout);
                apply_mask(&mut a1, &mask);
                let z2 = block.fc2.forward(&a1)?;
                let (normed, ntrace) = block.norm.forward_traced(&z2)?;
                let out = cur.add(&normed)?;
                trace.block_z1[bi].push(z1);
                trace.block_drop[bi].push(mask);
                trace.block_a1[bi].push(a1);
                trace.block_norm[bi].push(ntrace);
                cur = out;
            }
            trace.dec0_in.push(cur.clone());
            let pre = self.dec0.forward(&cur, d0)?;
            let mut act = relu_vec(&pre);
            let mask = draw_mask(act.len(), rate, &mut dropout);
            apply_mask(&mut act, &mask);
            trace.dec0_pre.push(pre);
            trace.dec_drop.push(mask);
            trace.dec1_in.push(act.clone());
            trace.outputs.push(self.dec1.forward(&act, d1)?);
        }
        Ok(trace)
    }

    /// Mean loss and mean trainable-parameter gradient over the batch,
    /// after fingerprint authorization. Passing a stream enables dropout
    /// for this pass (training mode).
    pub fn backward(
        &self,
        xs: &[Vector],
        targets: &[Target],
        keys: &KeySet,
        dropout: Option<&mut RngStream>,
    ) -> Result<(f64, ParamVector)> {
        self.check_keys(keys)?;
        self.backward_unchecked(xs, targets, keys, dropout)
    }

    /// Same computation as `backward` with the fingerprint comparison
    /// skipped; the gradient-mismatch experiments differentiate under
    /// substituted keys through this entry point.
    pub fn backward_unchecked(
        &self,
        xs: &[Vector],
        targets: &[Target],
        keys: &KeySet,
        dropout: Option<&mut RngStream>,
    ) -> Result<(f64, ParamVector)> {
        if xs.is_empty() {
            return Err(Error::invalid("backward", "empty batch"));
        }
        if xs.len() != targets.len() {
            return Err(Error::shape(
                "backward",
                format!("{} inputs vs {} targets", xs.len(), targets.len()),
            ));
        }
        let (d0, d1) = self.deltas(Some(keys))?;
        let trace = self.forward_traced(xs, d0.as_ref(), d1.as_ref(), dropout)?;

        // Per-sample loss gradients at the output.
        let mut loss_sum = 0.0;
        let mut d_out = Vec::with_capacity(xs.len());
        for (out, target) in trace.outputs.iter().zip(targets) {
            let (l, g) = match (self.spec.task, target) {
                (Task::Classification, Target::Class(c)) => cross_entropy_with_grad(out, *c)?,
                (Task::Regression, Target::Values(t)) => mse_with_grad(out, t)?,
                _ => {
                    return Err(Error::invalid("backward", "target kind does not match the task"));
                }
            };
            loss_sum += l;
            d_out.push(g);
        }

        let key0 = keys.get("dec0");
        let key1 = keys.get("dec1");

        // Decoder, output side first.
        let g_dec1 = self.dec1.backward_batch("dec1", &trace.dec1_in, &d_out, key1)?;
        let mut d_pre0 = Vec::with_capacity(xs.len());
        for (s, du) in g_dec1.d_inputs().iter().enumerate() {
            let mut v = du.clone();
            apply_mask(&mut v, &trace.dec_drop[s]);
            for i in 0..v.len() {
                if trace.dec0_pre[s][i] <= 0.0 {
                    v[i] = 0.0;
                }
            }
            d_pre0.push(v);
        }
        let g_dec0 = self.dec0.backward_batch("dec0", &trace.dec0_in, &d_pre0, key0)?;

        // Residual trunk, in reverse.
        let mut upstream: Vec<Vector> = g_dec0.d_inputs().to_vec();
        let mut block_grads: Vec<(Matrix, Vector, Matrix, Vector, Vector, Vector)> =
            Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let mut d_gain = Vector::zeros(self.spec.hidden_dim);
            let mut d_bias = Vector::zeros(self.spec.hidden_dim);
            let mut dz2 = Vec::with_capacity(xs.len());
            for (s, g) in upstream.iter().enumerate() {
                dz2.push(block.norm.backward(&trace.block_norm[bi][s], g, &mut d_gain, &mut d_bias)?);
            }
            let g_fc2 = block.fc2.backward_batch(&trace.block_a1[bi], &dz2)?;
            let mut dz1 = Vec::with_capacity(xs.len());
            for (s, du) in g_fc2.d_inputs.iter().enumerate() {
                let mut v = du.clone();
                apply_mask(&mut v, &trace.block_drop[bi][s]);
                for i in 0..v.len() {
                    if trace.block_z1[bi][s][i] <= 0.0 {
                        v[i] = 0.0;
                    }
                }
                dz1.push(v);
            }
            let g_fc1 = block.fc1.backward_batch(&trace.block_x[bi], &dz1)?;
            // The residual add routes the upstream both around and through.
            for (s, dx) in g_fc1.d_inputs.iter().enumerate() {
                upstream[s].add_assign_scaled(dx, 1.0)?;
            }
            block_grads.push((g_fc1.d_weight, g_fc1.d_bias, g_fc2.d_weight, g_fc2.d_bias, d_gain, d_bias));
        }
        block_grads.reverse();

        let g_embed = self.embed.backward_batch(xs, &upstream)?;

        // Assemble in the canonical trainable order and take batch means.
        let mut pv = ParamVector::new();
        push_matrix(&mut pv, "embed.w".into(), &g_embed.d_weight)?;
        push_vector(&mut pv, "embed.b".into(), &g_embed.d_bias)?;
        for (i, (w1, b1, w2, b2, g, b)) in block_grads.iter().enumerate() {
            push_matrix(&mut pv, format!("block{i}.fc1.w"), w1)?;
            push_vector(&mut pv, format!("block{i}.fc1.b"), b1)?;
            push_matrix(&mut pv, format!("block{i}.fc2.w"), w2)?;
            push_vector(&mut pv, format!("block{i}.fc2.b"), b2)?;
            push_vector(&mut pv, format!("block{i}.ln.g"), g)?;
            push_vector(&mut pv, format!("block{i}.ln.b"), b)?;
        }
        self.dec0.push_grads("dec0", &mut pv, &g_dec0)?;
        self.dec1.push_grads("dec1", &mut pv, &g_dec1)?;
        let scale = 1.0 / xs.len() as f64;
        pv.scale_in_place(scale);
        Ok((loss_sum * scale, pv))
    }

    /// Every trainable parameter, in update order. Frozen adapter bases are
    /// excluded; they travel only through `full_state`.
    pub fn params(&self) -> ParamVector {
        self.collect_params(false).expect("layout construction cannot fail")
    }

    /// Every parameter including frozen adapter bases — the checkpoint view.
    pub fn full_state(&self) -> ParamVector {
        self.collect_params(true).expect("layout construction cannot fail")
    }

    fn collect_params(&self, full: bool) -> Result<ParamVector> {
        let mut pv = ParamVector::new();
        push_matrix(&mut pv, "embed.w".into(), self.embed.weight())?;
        push_vector(&mut pv, "embed.b".into(), self.embed.bias())?;
        for (i, block) in self.blocks.iter().enumerate() {
            push_matrix(&mut pv, format!("block{i}.fc1.w"), block.fc1.weight())?;
            push_vector(&mut pv, format!("block{i}.fc1.b"), block.fc1.bias())?;
            push_matrix(&mut pv, format!("block{i}.fc2.w"), block.fc2.weight())?;
            push_vector(&mut pv, format!("block{i}.fc2.b"), block.fc2.bias())?;
            push_vector(&mut pv, format!("block{i}.ln.g"), &block.norm.gain)?;
            push_vector(&mut pv, format!("block{i}.ln.b"), &block.norm.bias)?;
        }
        self.dec0.push_params("dec0", &mut pv, full)?;
        self.dec1.push_params("dec1", &mut pv, full)?;
        Ok(pv)
    }

    /// Writes trainable parameters; the layout must equal `params()`.
    pub fn set_params(&mut self, pv: &ParamVector) -> Result<()> {
        self.params().require_same_layout(pv, "set params")?;
        self.apply_segments(pv)
    }

    /// Writes the complete state; the layout must equal `full_state()`.
    pub fn load_full_state(&mut self, pv: &ParamVector) -> Result<()> {
        self.full_state().require_same_layout(pv, "load state")?;
        self.apply_segments(pv)
    }

    fn apply_segments(&mut self, pv: &ParamVector) -> Result<()> {
        for seg in pv.segments() {
            self.assign_segment(&seg.name, &seg.values)?;
        }
        Ok(())
    }

    fn assign_segment(&mut self, name: &str, values: &[f64]) -> Result<()> {
        if let Some(field) = name.strip_prefix("embed.") {
            match field {
                "w" => self.embed.weight.data_mut().copy_from_slice(values),
                "b" => self.embed.bias.as_mut_slice().copy_from_slice(values),
                other => return Err(Error::invalid("parameter segment", format!("embed.{other}"))),
            }
            return Ok(());
        }
        if let Some(rest) = name.strip_prefix("block") {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::invalid("parameter segment", name.to_string()))?;
            let i: usize = idx
                .parse()
                .map_err(|_| Error::invalid("parameter segment", name.to_string()))?;
            let block = self
                .blocks
                .get_mut(i)
                .ok_or_else(|| Error::invalid("parameter segment", format!("no block {i}")))?;
            match field {
                "fc1.w" => block.fc1.weight.data_mut().copy_from_slice(values),
                "fc1.b" => block.fc1.bias.as_mut_slice().copy_from_slice(values),
                "fc2.w" => block.fc2.weight.data_mut().copy_from_slice(values),
                "fc2.b" => block.fc2.bias.as_mut_slice().copy_from_slice(values),
                "ln.g" => block.norm.gain.as_mut_slice().copy_from_slice(values),
                "ln.b" => block.norm.bias.as_mut_slice().copy_from_slice(values),
                other => return Err(Error::invalid("parameter segment", format!("block.{other}"))),
            }
            return Ok(());
        }
        if let Some(field) = name.strip_prefix("dec0.") {
            return self.dec0.assign(field, values);
        }
        if let Some(field) = name.strip_prefix("dec1.") {
            return self.dec1.assign(field, values);
        }
        Err(Error::invalid("parameter segment", name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_grad, relative_gap};
    use crate::numerics::rng::derive_stream;

    fn small_spec(locked: &[&str]) -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden_dim: 4,
            n_residual_blocks: 1,
            decoder_hidden: 3,
            output_dim: 2,
            locked_layers: locked.iter().map(|s| s.to_string()).collect(),
            dropout_rate: 0.0,
            task: Task::Classification,
        }
    }

    fn small_lock() -> LockConfig {
        LockConfig { alpha: 0.6, levels: 2, inr_hidden: 3, inr_layers: 2, activation: Activation::Relu }
    }

    fn keys_for(model: &Model, seed: u64) -> KeySet {
        let mut ks = KeySet::new();
        for name in model.locked_layer_names() {
            let n_out = model.locked_layer(&name).unwrap().n_out();
            let mut s = derive_stream(seed, &[n_out as u64]);
            ks.insert(name, PermutationKey::generate(n_out, &mut s).unwrap());
        }
        ks
    }

    fn batch() -> (Vec<Vector>, Vec<Target>) {
        (
            vec![
                Vector::from_vec(vec![0.4, -1.2, 0.8]),
                Vector::from_vec(vec![-0.3, 0.5, 1.5]),
            ],
            vec![Target::Class(0), Target::Class(1)],
        )
    }

    #[test]
    fn parameter_count_matches_hand_total() {
        // embed 8x4 + 8 = 40; dec0 8x8 + 8 = 72 plus modulation net over a
        // 4-wide encoding: (8x4 + 8) + (8x8 + 8) + (1x8 + 1) = 121;
        // dec1 2x8 + 2 = 18. Total 251.
        let spec = ModelSpec {
            input_dim: 4,
            hidden_dim: 8,
            n_residual_blocks: 0,
            decoder_hidden: 8,
            output_dim: 2,
            locked_layers: vec!["dec0".into()],
            dropout_rate: 0.0,
            task: Task::Classification,
        };
        let lock = LockConfig { alpha: 0.5, levels: 2, inr_hidden: 8, inr_layers: 3, activation: Activation::Relu };
        let model = build_model(&spec, &lock, &derive_stream(1, &[0])).unwrap();
        assert_eq!(model.params().total_len(), 251);
        // No residual blocks: the model is a plain MLP and still runs.
        let keys = keys_for(&model, 9);
        let y = model.forward(&Vector::from_vec(vec![1.0, 0.0, -1.0, 2.0]), &keys).unwrap();
        assert_eq!(y.len(), 2);
    }

    #[test]
    fn builds_are_deterministic() {
        let spec = small_spec(&["dec0", "dec1"]);
        let stream = derive_stream(2, &[7]);
        let a = build_model(&spec, &small_lock(), &stream).unwrap();
        let b = build_model(&spec, &small_lock(), &stream).unwrap();
        let fa = a.full_state().flatten();
        let fb = b.full_state().flatten();
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn forward_matches_manual_composition() {
        let spec = ModelSpec { n_residual_blocks: 2, ..small_spec(&[]) };
        let model = build_model(&spec, &small_lock(), &derive_stream(3, &[0])).unwrap();
        let x = Vector::from_vec(vec![0.7, -0.2, 1.1]);
        let got = model.forward(&x, &KeySet::new()).unwrap();

        // Recompose by hand from the raw weights.
        let mut h = model.embed.weight().matvec(&x).unwrap();
        h.add_assign_scaled(model.embed.bias(), 1.0).unwrap();
        for block in &model.blocks {
            let mut z1 = block.fc1.weight().matvec(&h).unwrap();
            z1.add_assign_scaled(block.fc1.bias(), 1.0).unwrap();
            let a1 = Vector::from_vec(z1.as_slice().iter().map(|v| v.max(0.0)).collect());
            let mut z2 = block.fc2.weight().matvec(&a1).unwrap();
            z2.add_assign_scaled(block.fc2.bias(), 1.0).unwrap();
            let n = z2.len() as f64;
            let mu = z2.as_slice().iter().sum::<f64>() / n;
            let var = z2.as_slice().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for i in 0..z2.len() {
                let xhat = (z2[i] - mu) * inv;
                h[i] += block.norm.gain[i] * xhat + block.norm.bias[i];
            }
        }
        let (w0, b0) = match &model.dec0 {
            DecoderLayer::Plain(l) => (l.weight(), l.bias()),
            _ => unreachable!(),
        };
        let mut pre = w0.matvec(&h).unwrap();
        pre.add_assign_scaled(b0, 1.0).unwrap();
        let act = Vector::from_vec(pre.as_slice().iter().map(|v| v.max(0.0)).collect());
        let (w1, b1) = match &model.dec1 {
            DecoderLayer::Plain(l) => (l.weight(), l.bias()),
            _ => unreachable!(),
        };
        let mut want = w1.matvec(&act).unwrap();
        want.add_assign_scaled(b1, 1.0).unwrap();

        for i in 0..want.len() {
            assert!((got[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_blended_lock_equals_plain_model() {
        // With the blend entirely on the affine path, a locked build and an
        // unlocked build from the same stream agree everywhere.
        let stream = derive_stream(4, &[1]);
        let lock = LockConfig { alpha: 1.0, ..small_lock() };
        let locked = build_model(&small_spec(&["dec0", "dec1"]), &lock, &stream).unwrap();
        let plain = build_model(&small_spec(&[]), &lock, &stream).unwrap();
        let keys = keys_for(&locked, 11);
        let mut s = derive_stream(4, &[2]);
        for _ in 0..100 {
            let x = Vector::from_vec((0..3).map(|_| s.next_normal()).collect());
            let a = locked.forward(&x, &keys).unwrap();
            let b = plain.forward(&x, &KeySet::new()).unwrap();
            for i in 0..a.len() {
                assert!((a[i] - b[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn missing_or_mismatched_keys_are_rejected() {
        let mut model =
            build_model(&small_spec(&["dec1"]), &small_lock(), &derive_stream(5, &[0])).unwrap();
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        let err = model.forward(&x, &KeySet::new()).unwrap_err().to_string();
        assert!(err.contains("key required"), "{err}");

        let true_keys = keys_for(&model, 21);
        model.bind_keys(&true_keys).unwrap();
        model.forward(&x, &true_keys).unwrap();

        // Only two permutations exist on two outputs, so scan seeds for
        // the one that differs from the bound key.
        let other_keys = (22..64)
            .map(|seed| keys_for(&model, seed))
            .find(|ks| {
                ks.get("dec1").unwrap().fingerprint()
                    != true_keys.get("dec1").unwrap().fingerprint()
            })
            .expect("some seed yields the other permutation");
        assert!(model.forward(&x, &other_keys).is_err());
        // The unchecked path accepts any size-compatible key.
        model.forward_batch_unchecked(&[x], &other_keys).unwrap();
    }

    #[test]
    fn stripped_output_drops_exactly_the_modulation_term() {
        // Lock only the output layer so the difference is observable
        // directly on the outputs.
        let mut model =
            build_model(&small_spec(&["dec1"]), &small_lock(), &derive_stream(6, &[3])).unwrap();
        // Give the modulation net nonzero parameters so the term matters.
        let mut pv = model.params();
        let mut s = derive_stream(6, &[4]);
        for v in pv.values_mut() {
            *v += 0.3 * s.next_normal();
        }
        model.set_params(&pv).unwrap();

        let keys = keys_for(&model, 31);
        let key = keys.get("dec1").unwrap();
        let delta = model.locked_layer("dec1").unwrap().modulation(key).unwrap();
        let xs = vec![Vector::from_vec(vec![0.2, -0.4, 0.9])];
        let auth = model.forward_batch(&xs, &keys).unwrap();
        let stripped = model.forward_batch_stripped(&xs).unwrap();
        let alpha = model.lock_config().alpha;
        for i in 0..auth[0].len() {
            let diff = auth[0][i] - stripped[0][i];
            assert!((diff - (1.0 - alpha) * delta[i]).abs() < 1e-12);
        }
    }

    /// Shared scaffolding: finite differences through the whole model.
    fn gradcheck(model: &Model, keys: &KeySet, xs: &[Vector], targets: &[Target]) {
        let layout = model.params();
        // Nudge all parameters (including zero-initialized ones) so every
        // gradient path is exercised at a generic point.
        let mut s = derive_stream(77, &[layout.total_len() as u64]);
        let mut at = layout.clone();
        for v in at.values_mut() {
            *v += 0.15 * s.next_normal();
        }
        let mut m = model.clone();
        m.set_params(&at).unwrap();

        let (_, analytic) = m.backward(xs, targets, keys, None).unwrap();
        let flat = Vector::from_vec(at.flatten());
        let f = |p: &Vector| {
            let mut probe = m.clone();
            probe.set_params(&layout.unflatten_like(p.as_slice())?)?;
            let outs = probe.forward_batch_unchecked(xs, keys)?;
            Ok(metrics(&outs, targets, probe.task())?.loss)
        };
        let numeric = finite_diff_grad(f, &flat, 1e-5).unwrap();
        let gap = relative_gap(&Vector::from_vec(analytic.flatten()), &numeric).unwrap();
        assert!(gap < 1e-5, "relative gap {gap}");
    }

    #[test]
    fn locked_model_gradient_matches_finite_differences() {
        let model =
            build_model(&small_spec(&["dec0", "dec1"]), &small_lock(), &derive_stream(7, &[0]))
                .unwrap();
        let keys = keys_for(&model, 41);
        let (xs, ts) = batch();
        gradcheck(&model, &keys, &xs, &ts);
    }

    #[test]
    fn regression_gradient_matches_finite_differences() {
        let spec = ModelSpec { task: Task::Regression, ..small_spec(&["dec0"]) };
        let model = build_model(&spec, &small_lock(), &derive_stream(8, &[0])).unwrap();
        let keys = keys_for(&model, 42);
        let xs = vec![Vector::from_vec(vec![0.1, 0.9, -0.5])];
        let ts = vec![Target::Values(Vector::from_vec(vec![0.3, -0.7]))];
        gradcheck(&model, &keys, &xs, &ts);
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let mut model =
            build_model(&small_spec(&[]), &small_lock(), &derive_stream(9, &[0])).unwrap();
        let mut s = derive_stream(9, &[1]);
        model.attach_lora("dec1", 2, 1.0, &mut s).unwrap();
        let (xs, ts) = batch();
        gradcheck(&model, &KeySet::new(), &xs, &ts);
    }

    #[test]
    fn duplicated_sample_gradient_equals_single_sample() {
        let model =
            build_model(&small_spec(&["dec1"]), &small_lock(), &derive_stream(10, &[0])).unwrap();
        let keys = keys_for(&model, 43);
        let x = Vector::from_vec(vec![0.5, 0.5, -1.0]);
        let (l1, g1) = model.backward(&[x.clone()], &[Target::Class(1)], &keys, None).unwrap();
        let (l2, g2) = model
            .backward(&[x.clone(), x], &[Target::Class(1), Target::Class(1)], &keys, None)
            .unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1.flatten(), g2.flatten());
    }

    #[test]
    fn perfect_regression_fit_has_zero_gradient() {
        let spec = ModelSpec { task: Task::Regression, ..small_spec(&[]) };
        let model = build_model(&spec, &small_lock(), &derive_stream(11, &[0])).unwrap();
        let x = Vector::from_vec(vec![0.4, 0.1, -0.2]);
        let y = model.forward(&x, &KeySet::new()).unwrap();
        let (loss, grads) = model
            .backward(&[x], &[Target::Values(y)], &KeySet::new(), None)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adapter_base_is_frozen_and_checkpointed() {
        let mut model =
            build_model(&small_spec(&[]), &small_lock(), &derive_stream(12, &[0])).unwrap();
        let mut s = derive_stream(12, &[1]);
        model.attach_lora("dec0", 2, 1.0, &mut s).unwrap();
        let trainable: Vec<_> = model.params().segments().iter().map(|s| s.name.clone()).collect();
        assert!(!trainable.contains(&"dec0.w".to_string()));
        assert!(trainable.contains(&"dec0.lora.a".to_string()));
        let full: Vec<_> = model.full_state().segments().iter().map(|s| s.name.clone()).collect();
        assert!(full.contains(&"dec0.w".to_string()));

        // Round-trip the full state through a perturbed copy.
        let state = model.full_state();
        let mut other = model.clone();
        let mut pv = other.params();
        for v in pv.values_mut() {
            *v += 1.0;
        }
        other.set_params(&pv).unwrap();
        other.load_full_state(&state).unwrap();
        assert_eq!(other.full_state().flatten(), model.full_state().flatten());

        // Attaching twice, or onto a locked layer, is rejected.
        assert!(model.attach_lora("dec0", 2, 1.0, &mut s).is_err());
        let mut locked =
            build_model(&small_spec(&["dec1"]), &small_lock(), &derive_stream(12, &[2])).unwrap();
        assert!(locked.attach_lora("dec1", 2, 1.0, &mut s).is_err());
    }

    #[test]
    fn set_params_rejects_foreign_layouts() {
        let mut model =
            build_model(&small_spec(&[]), &small_lock(), &derive_stream(13, &[0])).unwrap();
        let other =
            build_model(&small_spec(&["dec0"]), &small_lock(), &derive_stream(13, &[1])).unwrap();
        let err = model.set_params(&other.params()).unwrap_err().to_string();
        assert!(err.contains("dec0"), "{err}");
    }

    #[test]
    fn full_rank_adapter_represents_any_update() {
        // rank == n_in lets the adapter hit an arbitrary target exactly:
        // solve B from target * inverse(A).
        let mut s = derive_stream(14, &[0]);
        let mut adapter = LoraAdapter::new(3, 4, 3, 1.0, &mut s).unwrap();
        let target = kaiming_like(4, 3, &mut s);
        let a_inv = invert3(adapter.a());
        // factor = scaling / rank = 1/3, so B = 3 * target * A^-1.
        let mut b = Matrix::zeros(4, 3);
        for r in 0..4 {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += target.get(r, k) * a_inv.get(k, c);
                }
                b.set(r, c, 3.0 * acc);
            }
        }
        adapter.b = b;
        let delta = adapter.delta().unwrap();
        for i in 0..delta.data().len() {
            assert!((delta.data()[i] - target.data()[i]).abs() < 1e-8);
        }
    }

    fn kaiming_like(rows: usize, cols: usize, s: &mut crate::numerics::rng::RngStream) -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(s.next_normal());
        }
        Matrix::new(rows, cols, data).unwrap()
    }

    /// Gauss-Jordan inverse of a 3x3 matrix (test oracle only).
    fn invert3(a: &Matrix) -> Matrix {
        let n = 3;
        let mut aug = vec![vec![0.0; 2 * n]; n];
        for r in 0..n {
            for c in 0..n {
                aug[r][c] = a.get(r, c);
            }
            aug[r][n + r] = 1.0;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            assert!(p.abs() > 1e-12, "singular test matrix");
            for c in 0..2 * n {
                aug[col][c] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[r][col];
                    for c in 0..2 * n {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        let mut out = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                out.set(r, c, aug[r][n + c]);
            }
        }
        out
    }

    #[test]
    fn full_batch_training_loss_is_monotone_on_separable_data() {
        let spec = ModelSpec {
            input_dim: 2,
            hidden_dim: 4,
            n_residual_blocks: 0,
            decoder_hidden: 4,
            output_dim: 2,
            locked_layers: vec![],
            dropout_rate: 0.0,
            task: Task::Classification,
        };
        let mut model = build_model(&spec, &LockConfig::default(), &derive_stream(15, &[0])).unwrap();
        let mut s = derive_stream(15, &[1]);
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for i in 0..20 {
            let class = i % 2;
            let center = if class == 0 { -1.0 } else { 1.0 };
            xs.push(Vector::from_vec(vec![
                center + 0.1 * s.next_normal(),
                0.1 * s.next_normal(),
            ]));
            ts.push(Target::Class(class));
        }
        let keys = KeySet::new();
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let (loss, grads) = model.backward(&xs, &ts, &keys, None).unwrap();
            assert!(loss <= last + 1e-12, "loss rose from {last} to {loss}");
            last = loss;
            let mut p = model.params();
            sgd_step(&mut p, &grads, 0.05).unwrap();
            model.set_params(&p).unwrap();
        }
        let metrics = model.evaluate(&xs, &ts, &keys).unwrap();
        assert!(metrics.accuracy.unwrap() > 0.9);
    }

    #[test]
    fn dropout_zero_is_identity_and_masks_are_stream_deterministic() {
        let spec = ModelSpec { dropout_rate: 0.0, ..small_spec(&[]) };
        let model = build_model(&spec, &small_lock(), &derive_stream(16, &[0])).unwrap();
        let (xs, ts) = batch();
        let keys = KeySet::new();
        let mut stream = derive_stream(16, &[1]);
        let (l_none, g_none) = model.backward(&xs, &ts, &keys, None).unwrap();
        let (l_zero, g_zero) = model.backward(&xs, &ts, &keys, Some(&mut stream)).unwrap();
        assert_eq!(l_none, l_zero);
        assert_eq!(g_none.flatten(), g_zero.flatten());
        // Zero-rate training consumed no randomness.
        assert_eq!(stream, derive_stream(16, &[1]));

        let spec = ModelSpec { dropout_rate: 0.5, ..small_spec(&[]) };
        let model = build_model(&spec, &small_lock(), &derive_stream(16, &[2])).unwrap();
        let mut s1 = derive_stream(16, &[3]);
        let mut s2 = derive_stream(16, &[3]);
        let (la, ga) = model.backward(&xs, &ts, &keys, Some(&mut s1)).unwrap();
        let (lb, gb) = model.backward(&xs, &ts, &keys, Some(&mut s2)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga.flatten(), gb.flatten());
        // A different stream position gives a different masked pass.
        let mut s3 = derive_stream(16, &[4]);
        let (lc, _) = model.backward(&xs, &ts, &keys, Some(&mut s3)).unwrap();
        assert_ne!(la, lc);
    }

    #[test]
    fn metrics_report_accuracy_and_mean_loss() {
        let outputs = vec![
            Vector::from_vec(vec![2.0, 0.0]),
            Vector::from_vec(vec![0.0, 2.0]),
            Vector::from_vec(vec![2.0, 0.0]),
        ];
        let targets = vec![Target::Class(0), Target::Class(1), Target::Class(1)];
        let m = metrics(&outputs, &targets, Task::Classification).unwrap();
        assert!((m.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(m.loss > 0.0);
        assert!(metrics(&outputs, &targets, Task::Regression).is_err());
        assert!(metrics(&[], &[], Task::Classification).is_err());
    }

    #[test]
    fn spec_validation_names_the_offending_field() {
        let mut spec = small_spec(&[]);
        spec.output_dim = 0;
        assert!(spec.validate().unwrap_err().to_string().contains("output_dim"));
        let mut spec = small_spec(&["dec2"]);
        assert!(spec.validate().is_err());
        spec.locked_layers = vec!["dec0".into(), "dec0".into()];
        assert!(spec.validate().is_err());
        let bad_lock = LockConfig { alpha: 1.5, ..LockConfig::default() };
        assert!(bad_lock.validate().is_err());
    }
}
