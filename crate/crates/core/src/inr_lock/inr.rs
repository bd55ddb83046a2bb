//! The implicit modulation network: a small MLP from an encoded output
//! coordinate to one scalar correction.

use crate::error::{Error, Result};
use crate::numerics::matrix::{Matrix, Vector};
use crate::numerics::rng::RngStream;
use crate::numerics::sampling::kaiming_init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at the preactivation; ReLU uses subgradient 0 at 0.
    fn slope(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// How to initialize the network's parameters.
///
/// `ZeroOutput` zeroes the last layer so the modulation starts exactly at
/// zero (training starts from the plain affine function). `FullRandom`
/// draws every layer, which the attack experiments use when they need a
/// non-degenerate modulation before any training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InrInit {
    ZeroOutput,
    FullRandom,
}

/// Hidden layers use the configured activation; the output is linear.
/// Weights are drawn layer by layer (row-major within a layer), biases
/// start at zero; that draw order is part of the reproducibility contract.
#[derive(Debug, Clone, PartialEq)]
pub struct InrNetwork {
    weights: Vec<Matrix>,
    biases: Vec<Vector>,
    activation: Activation,
}

/// Per-parameter gradient accumulator shaped like a network.
#[derive(Debug, Clone)]
pub struct InrParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

pub(crate) struct InrTrace {
    /// Layer inputs: `acts[l]` feeds linear layer `l`; `acts[0]` is the encoding.
    acts: Vec<Vector>,
    /// Preactivations of the hidden layers, needed for activation slopes.
    preacts: Vec<Vector>,
    output: f64,
}

impl InrNetwork {
    /// `n_layers` counts linear maps; widths run
    /// `2 * levels -> hidden_width x (n_layers - 1) -> 1`.
    pub fn new(
        levels: usize,
        hidden_width: usize,
        n_layers: usize,
        activation: Activation,
        init: InrInit,
        stream: &mut RngStream,
    ) -> Result<InrNetwork> {
        if n_layers == 0 {
            return Err(Error::invalid("inr depth", "need at least one layer"));
        }
        if hidden_width == 0 && n_layers > 1 {
            return Err(Error::invalid("inr hidden width", "must be nonzero"));
        }
        let mut widths = Vec::with_capacity(n_layers + 1);
        widths.push(2 * levels);
        for _ in 0..n_layers - 1 {
            widths.push(hidden_width);
        }
        widths.push(1);

        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (rows, cols) = (widths[l + 1], widths[l]);
            let last = l == n_layers - 1;
            let w = if last && init == InrInit::ZeroOutput {
                Matrix::zeros(rows, cols)
            } else {
                kaiming_init(rows, cols, stream)?
            };
            weights.push(w);
            biases.push(Vector::zeros(rows));
        }
        Ok(InrNetwork { weights, biases, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self, l: usize) -> &Matrix {
        &self.weights[l]
    }

    pub fn bias(&self, l: usize) -> &Vector {
        &self.biases[l]
    }

    pub fn theta_len(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data().len() + b.len())
            .sum()
    }

    pub fn forward(&self, enc: &Vector) -> Result<f64> {
        Ok(self.forward_traced(enc)?.output)
    }

    pub(crate) fn forward_traced(&self, enc: &Vector) -> Result<InrTrace> {
        if enc.len() != self.input_dim() {
            return Err(Error::shape(
                "inr forward",
                format!("encoding len {} vs input dim {}", enc.len(), self.input_dim()),
            ));
        }
        let n = self.weights.len();
        let mut acts = Vec::with_capacity(n);
        let mut preacts = Vec::with_capacity(n.saturating_sub(1));
        let mut cur = enc.clone();
        for l in 0..n - 1 {
            let mut z = self.weights[l].matvec(&cur)?;
            z.add_assign_scaled(&self.biases[l], 1.0)?;
            let mut a = z.clone();
            for v in a.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
            acts.push(cur);
            preacts.push(z);
            cur = a;
        }
        let mut out = self.weights[n - 1].matvec(&cur)?;
        out.add_assign_scaled(&self.biases[n - 1], 1.0)?;
        acts.push(cur);
        Ok(InrTrace { acts, preacts, output: out[0] })
    }

    /// Accumulates `upstream * d(output)/d(theta)` into `grads`.
    pub(crate) fn backward(&self, trace: &InrTrace, upstream: f64, grads: &mut InrParamGrads) -> Result<()> {
        let n = self.weights.len();
        let mut u = Vector::from_vec(vec![upstream]);
        for l in (0..n).rev() {
            grads.weights[l].add_scaled_outer(&u, &trace.acts[l], 1.0)?;
            grads.biases[l].add_assign_scaled(&u, 1.0)?;
            if l == 0 {
                break;
            }
            let da = self.weights[l].t_matvec(&u)?;
            let mut next = da;
            for (v, &z) in next.as_mut_slice().iter_mut().zip(trace.preacts[l - 1].as_slice()) {
                *v *= self.activation.slope(z);
            }
            u = next;
        }
        Ok(())
    }

    /// `d(output)/d(theta)` at one encoding, flattened in canonical order.
    pub fn theta_jacobian(&self, enc: &Vector) -> Result<Vec<f64>> {
        let trace = self.forward_traced(enc)?;
        let mut grads = InrParamGrads::zeros_like(self);
        self.backward(&trace, 1.0, &mut grads)?;
        Ok(grads.flatten())
    }

    /// Canonical flat order: per layer, weight row-major then bias.
    pub fn theta_to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.theta_len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_theta_from_slice(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_len() {
            return Err(Error::shape(
                "inr set theta",
                format!("{} values vs {} parameters", theta.len(), self.theta_len()),
            ));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wl = w.data().len();
            w.data_mut().copy_from_slice(&theta[at..at + wl]);
            at += wl;
            let bl = b.len();
            b.as_mut_slice().copy_from_slice(&theta[at..at + bl]);
            at += bl;
        }
        Ok(())
    }
}

impl InrParamGrads {
    pub fn zeros_like(net: &InrNetwork) -> InrParamGrads {
        InrParamGrads {
            weights: net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: net.biases.iter().map(|b| Vector::zeros(b.len())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for v in w.data_mut() {
                *v *= s;
            }
        }
        for b in &mut self.biases {
            b.scale_in_place(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr_lock::encoding::encode;
    use crate::numerics::gradcheck::{finite_diff_grad, relative_gap};
    use crate::numerics::rng::derive_stream;

    fn small_net(init: InrInit, seed: u64) -> InrNetwork {
        let mut s = derive_stream(seed, &[0]);
        InrNetwork::new(2, 5, 3, Activation::Relu, init, &mut s).unwrap()
    }

    #[test]
    fn zero_output_init_is_exactly_zero() {
        let net = small_net(InrInit::ZeroOutput, 1);
        for c in [-1.0, -0.25, 0.0, 0.8] {
            let enc = encode(c, 2).unwrap();
            assert_eq!(net.forward(&enc).unwrap(), 0.0);
        }
    }

    #[test]
    fn random_init_varies_with_coordinate() {
        let net = small_net(InrInit::FullRandom, 2);
        let a = net.forward(&encode(-0.5, 2).unwrap()).unwrap();
        let b = net.forward(&encode(0.5, 2).unwrap()).unwrap();
        assert!(a.is_finite() && b.is_finite());
        assert_ne!(a, b);
    }

    #[test]
    fn theta_round_trip_is_bitwise() {
        let net = small_net(InrInit::FullRandom, 3);
        let theta = net.theta_to_vec();
        let mut other = small_net(InrInit::ZeroOutput, 4);
        other.set_theta_from_slice(&theta).unwrap();
        assert_eq!(other.theta_to_vec(), theta);
        assert_eq!(
            other.forward(&encode(0.3, 2).unwrap()).unwrap(),
            net.forward(&encode(0.3, 2).unwrap()).unwrap()
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Fixed seeds chosen away from ReLU kinks so the central-difference
        // oracle is valid at h = 1e-5.
        for seed in [10u64, 11, 12, 13] {
            let net = small_net(InrInit::FullRandom, seed);
            let enc = encode(0.37, 2).unwrap();
            let analytic = Vector::from_vec(net.theta_jacobian(&enc).unwrap());
            let theta0 = Vector::from_vec(net.theta_to_vec());
            let mut probe_net = net.clone();
            let numeric = finite_diff_grad(
                |theta| {
                    probe_net.set_theta_from_slice(theta.as_slice())?;
                    probe_net.forward(&enc)
                },
                &theta0,
                1e-5,
            )
            .unwrap();
            let gap = relative_gap(&analytic, &numeric).unwrap();
            assert!(gap < 1e-6, "seed {seed}: relative gap {gap}");
        }
    }

    #[test]
    fn tanh_backward_matches_finite_differences() {
        let mut s = derive_stream(20, &[0]);
        let net = InrNetwork::new(3, 4, 2, Activation::Tanh, InrInit::FullRandom, &mut s).unwrap();
        let enc = encode(-0.61, 3).unwrap();
        let analytic = Vector::from_vec(net.theta_jacobian(&enc).unwrap());
        let theta0 = Vector::from_vec(net.theta_to_vec());
        let mut probe = net.clone();
        let numeric = finite_diff_grad(
            |theta| {
                probe.set_theta_from_slice(theta.as_slice())?;
                probe.forward(&enc)
            },
            &theta0,
            1e-5,
        )
        .unwrap();
        assert!(relative_gap(&analytic, &numeric).unwrap() < 1e-7);
    }

    #[test]
    fn rejects_degenerate_shapes() {
        let mut s = derive_stream(30, &[0]);
        assert!(InrNetwork::new(2, 4, 0, Activation::Relu, InrInit::ZeroOutput, &mut s).is_err());
        assert!(InrNetwork::new(2, 0, 3, Activation::Relu, InrInit::ZeroOutput, &mut s).is_err());
        let net = small_net(InrInit::FullRandom, 31);
        assert!(net.forward(&Vector::zeros(3)).is_err());
    }
}
