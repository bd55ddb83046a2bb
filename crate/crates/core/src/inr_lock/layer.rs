//! The locked linear layer.
//!
//! With base affine map `W x + b`, blend weight `alpha`, and a modulation
//! network `phi`, the layer computes
//!
//! ```text
//! y_i = alpha (W x + b)_i + (1 - alpha) delta_i
//! delta_i = phi(encode(coordinate(pi(i))))
//! ```
//!
//! where `pi` is the holder's secret permutation of output indices. The
//! canonical modulation `delta*_j = phi(encode(coordinate(j)))` is what an
//! attacker can compute without the key; `delta_i = delta*_{pi(i)}` holds
//! exactly because both sides evaluate the network at the same encoding.
//!
//! Layer-level operations accept any key of the right size (the attack lab
//! depends on that); fingerprint authorization happens at the model layer.

use crate::error::{Error, Result};
use crate::inr_lock::encoding::{coordinate, encode};
use crate::inr_lock::inr::{Activation, InrInit, InrNetwork, InrParamGrads};
use crate::inr_lock::key::PermutationKey;
use crate::numerics::matrix::{Matrix, Vector};
use crate::numerics::rng::RngStream;
use crate::numerics::sampling::kaiming_init;

#[derive(Debug, Clone, PartialEq)]
pub struct InrLinearLayer {
    weight: Matrix,
    bias: Vector,
    alpha: f64,
    levels: usize,
    inr: InrNetwork,
    /// `encodings[j] = encode(coordinate(j))`, fixed at construction.
    encodings: Vec<Vector>,
    /// Fingerprint of the key this layer was bound to, if any.
    key_id: Option<String>,
    /// Bumped on every modulation-parameter write; caches compare it.
    theta_version: u64,
}

/// Sum-over-batch gradients of one locked layer.
pub struct LockedGrads {
    pub d_weight: Matrix,
    pub d_bias: Vector,
    pub d_theta: InrParamGrads,
    pub d_inputs: Vec<Vector>,
}

impl InrLinearLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_in: usize,
        n_out: usize,
        alpha: f64,
        levels: usize,
        inr_hidden: usize,
        inr_layers: usize,
        activation: Activation,
        init: InrInit,
        stream: &mut RngStream,
    ) -> Result<InrLinearLayer> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::invalid("locked layer dims", format!("{n_out}x{n_in}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid("alpha", format!("{alpha} not in [0, 1]")));
        }
        // Draw order: base weight first, then the modulation network.
        let weight = kaiming_init(n_out, n_in, stream)?;
        let inr = InrNetwork::new(levels, inr_hidden, inr_layers, activation, init, stream)?;
        let mut encodings = Vec::with_capacity(n_out);
        for j in 0..n_out {
            encodings.push(encode(coordinate(j, n_out)?, levels)?);
        }
        Ok(InrLinearLayer {
            weight,
            bias: Vector::zeros(n_out),
            alpha,
            levels,
            inr,
            encodings,
            key_id: None,
            theta_version: 0,
        })
    }

    pub fn n_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn inr(&self) -> &InrNetwork {
        &self.inr
    }

    pub fn theta_version(&self) -> u64 {
        self.theta_version
    }

    pub fn key_id(&self) -> Option<&str> {
        self.key_id.as_deref()
    }

    pub fn bind_key(&mut self, fingerprint: String) {
        self.key_id = Some(fingerprint);
    }

    pub(crate) fn set_weight_from_slice(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.weight.data().len() {
            return Err(Error::shape("locked layer weight", "length mismatch"));
        }
        self.weight.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn set_bias_from_slice(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.bias.len() {
            return Err(Error::shape("locked layer bias", "length mismatch"));
        }
        self.bias.as_mut_slice().copy_from_slice(values);
        Ok(())
    }

    /// Writes modulation parameters and invalidates every cache by
    /// bumping the version counter.
    pub fn set_theta_from_slice(&mut self, theta: &[f64]) -> Result<()> {
        self.inr.set_theta_from_slice(theta)?;
        self.theta_version += 1;
        Ok(())
    }

    fn check_key_size(&self, key: &PermutationKey, op: &'static str) -> Result<()> {
        if key.n_out() != self.n_out() {
            return Err(Error::shape(
                op,
                format!("key over {} indexes vs {} outputs", key.n_out(), self.n_out()),
            ));
        }
        Ok(())
    }

    /// `delta*_j` for every canonical coordinate.
    pub fn canonical_modulation(&self) -> Result<Vector> {
        let mut out = Vector::zeros(self.n_out());
        for j in 0..self.n_out() {
            out[j] = self.inr.forward(&self.encodings[j])?;
        }
        Ok(out)
    }

    /// `delta_i = delta*_{pi(i)}`, evaluated directly at the permuted
    /// encodings (identical code path as the canonical values).
    pub fn modulation(&self, key: &PermutationKey) -> Result<Vector> {
        self.check_key_size(key, "modulation")?;
        let mut out = Vector::zeros(self.n_out());
        for i in 0..self.n_out() {
            out[i] = self.inr.forward(&self.encodings[key.map(i)])?;
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Vector, key: &PermutationKey) -> Result<Vector> {
        let delta = self.modulation(key)?;
        self.forward_with_modulation(x, &delta)
    }

    /// Forward with a precomputed modulation (cache fast path).
    pub fn forward_with_modulation(&self, x: &Vector, delta: &Vector) -> Result<Vector> {
        if delta.len() != self.n_out() {
            return Err(Error::shape("forward", "modulation length mismatch"));
        }
        let mut y = self.weight.matvec(x)?;
        y.add_assign_scaled(&self.bias, 1.0)?;
        let mut out = Vector::zeros(self.n_out());
        for i in 0..self.n_out() {
            out[i] = self.alpha * y[i] + (1.0 - self.alpha) * delta[i];
        }
        Ok(out)
    }

    /// What a key-less adversary who deletes the modulation path computes:
    /// `alpha (W x + b)`. Only the attack lab should call this.
    pub fn forward_stripped(&self, x: &Vector) -> Result<Vector> {
        let mut y = self.weight.matvec(x)?;
        y.add_assign_scaled(&self.bias, 1.0)?;
        y.scale_in_place(self.alpha);
        Ok(y)
    }

    /// Sum-over-batch gradients for upstream `dL/dy` per sample.
    ///
    /// The modulation is input-independent, so its parameter gradient
    /// contracts the per-neuron upstream totals against one Jacobian per
    /// output index: `d theta = sum_i (1 - alpha) (sum_b u_bi) J(pi(i))`.
    pub fn backward_batch(
        &self,
        xs: &[Vector],
        upstreams: &[Vector],
        key: &PermutationKey,
    ) -> Result<LockedGrads> {
        self.check_key_size(key, "backward")?;
        if xs.len() != upstreams.len() {
            return Err(Error::shape("backward", "batch length mismatch"));
        }
        let mut d_weight = Matrix::zeros(self.n_out(), self.n_in());
        let mut d_bias = Vector::zeros(self.n_out());
        let mut d_theta = InrParamGrads::zeros_like(&self.inr);
        let mut d_inputs = Vec::with_capacity(xs.len());
        let mut upstream_total = Vector::zeros(self.n_out());
        for (x, u) in xs.iter().zip(upstreams) {
            if u.len() != self.n_out() {
                return Err(Error::shape("backward", "upstream length mismatch"));
            }
            d_weight.add_scaled_outer(u, x, self.alpha)?;
            d_bias.add_assign_scaled(u, self.alpha)?;
            let mut dx = self.weight.t_matvec(u)?;
            dx.scale_in_place(self.alpha);
            d_inputs.push(dx);
            upstream_total.add_assign_scaled(u, 1.0)?;
        }
        let mod_scale = 1.0 - self.alpha;
        for i in 0..self.n_out() {
            let s = mod_scale * upstream_total[i];
            if s == 0.0 {
                continue;
            }
            let trace = self.inr.forward_traced(&self.encodings[key.map(i)])?;
            self.inr.backward(&trace, s, &mut d_theta)?;
        }
        Ok(LockedGrads { d_weight, d_bias, d_theta, d_inputs })
    }
}

/// Caches one layer's modulation for one key; any modulation-parameter
/// write or key change forces recomputation, so a stale value is never
/// observable through `get_or_refresh`.
#[derive(Debug, Clone, Default)]
pub struct ModulationCache {
    delta: Option<Vector>,
    theta_version: u64,
    key_fingerprint: String,
}

impl ModulationCache {
    pub fn new() -> ModulationCache {
        ModulationCache::default()
    }

    pub fn get_or_refresh(
        &mut self,
        layer: &InrLinearLayer,
        key: &PermutationKey,
    ) -> Result<&Vector> {
        let stale = self.delta.is_none()
            || self.theta_version != layer.theta_version()
            || self.key_fingerprint != key.fingerprint();
        if stale {
            self.delta = Some(layer.modulation(key)?);
            self.theta_version = layer.theta_version();
            self.key_fingerprint = key.fingerprint().to_string();
        }
        Ok(self.delta.as_ref().expect("just refreshed"))
    }
}
