//! Unlocked building blocks: plain linear maps, layer normalization,
//! residual blocks, and low-rank adapters.

use crate::error::{Error, Result};
use crate::numerics::matrix::{Matrix, Vector};
use crate::numerics::rng::RngStream;
use crate::numerics::sampling::kaiming_init;

#[derive(Debug, Clone, PartialEq)]
pub struct PlainLinear {
    pub(crate) weight: Matrix,
    pub(crate) bias: Vector,
}

pub struct PlainGrads {
    pub d_weight: Matrix,
    pub d_bias: Vector,
    pub d_inputs: Vec<Vector>,
}

impl PlainLinear {
    pub fn new(n_in: usize, n_out: usize, stream: &mut RngStream) -> Result<PlainLinear> {
        Ok(PlainLinear { weight: kaiming_init(n_out, n_in, stream)?, bias: Vector::zeros(n_out) })
    }

    pub fn n_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        let mut y = self.weight.matvec(x)?;
        y.add_assign_scaled(&self.bias, 1.0)?;
        Ok(y)
    }

    /// Sum-over-batch gradients.
    pub fn backward_batch(&self, xs: &[Vector], upstreams: &[Vector]) -> Result<PlainGrads> {
        let mut d_weight = Matrix::zeros(self.n_out(), self.n_in());
        let mut d_bias = Vector::zeros(self.n_out());
        let mut d_inputs = Vec::with_capacity(xs.len());
        for (x, u) in xs.iter().zip(upstreams) {
            d_weight.add_scaled_outer(u, x, 1.0)?;
            d_bias.add_assign_scaled(u, 1.0)?;
            d_inputs.push(self.weight.t_matvec(u)?);
        }
        Ok(PlainGrads { d_weight, d_bias, d_inputs })
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub(crate) gain: Vector,
    pub(crate) bias: Vector,
    eps: f64,
}

pub(crate) struct NormTrace {
    xhat: Vector,
    inv_std: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gain: Vector::from_vec(vec![1.0; dim]),
            bias: Vector::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub(crate) fn forward_traced(&self, z: &Vector) -> Result<(Vector, NormTrace)> {
        if z.len() != self.dim() {
            return Err(Error::shape("layer norm", format!("{} vs {}", z.len(), self.dim())));
        }
        let n = z.len() as f64;
        let mu = z.as_slice().iter().sum::<f64>() / n;
        let var = z.as_slice().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + self.eps).sqrt();
        let mut xhat = Vector::zeros(z.len());
        let mut out = Vector::zeros(z.len());
        for i in 0..z.len() {
            xhat[i] = (z[i] - mu) * inv_std;
            out[i] = self.gain[i] * xhat[i] + self.bias[i];
        }
        Ok((out, NormTrace { xhat, inv_std }))
    }

    /// Returns `d_input`; accumulates gain and bias gradients.
    pub(crate) fn backward(
        &self,
        trace: &NormTrace,
        upstream: &Vector,
        d_gain: &mut Vector,
        d_bias: &mut Vector,
    ) -> Result<Vector> {
        let n = self.dim();
        let nf = n as f64;
        let mut dxhat = Vector::zeros(n);
        for i in 0..n {
            d_gain[i] += upstream[i] * trace.xhat[i];
            d_bias[i] += upstream[i];
            dxhat[i] = upstream[i] * self.gain[i];
        }
        let mean_dxhat = dxhat.as_slice().iter().sum::<f64>() / nf;
        let mean_dxhat_xhat = dxhat
            .as_slice()
            .iter()
            .zip(trace.xhat.as_slice())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / nf;
        let mut dz = Vector::zeros(n);
        for i in 0..n {
            dz[i] = trace.inv_std * (dxhat[i] - mean_dxhat - trace.xhat[i] * mean_dxhat_xhat);
        }
        Ok(dz)
    }
}

/// Two linear maps with a ReLU between, output normalized and added to the
/// block input: `y = x + norm(fc2(relu(fc1(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub(crate) fc1: PlainLinear,
    pub(crate) fc2: PlainLinear,
    pub(crate) norm: LayerNorm,
}

impl ResidualBlock {
    pub fn new(dim: usize, stream: &mut RngStream) -> Result<ResidualBlock> {
        Ok(ResidualBlock {
            fc1: PlainLinear::new(dim, dim, stream)?,
            fc2: PlainLinear::new(dim, dim, stream)?,
            norm: LayerNorm::new(dim),
        })
    }
}

/// Low-rank adapter `s/r * B A` next to a frozen base weight. `A` is drawn,
/// `B` starts at zero, so the adapter begins as an exact no-op.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub(crate) rank: usize,
    pub(crate) scaling: f64,
    pub(crate) a: Matrix,
    pub(crate) b: Matrix,
}

impl LoraAdapter {
    pub fn new(n_in: usize, n_out: usize, rank: usize, scaling: f64, stream: &mut RngStream) -> Result<LoraAdapter> {
        if rank == 0 || rank > n_in.min(n_out) {
            return Err(Error::invalid(
                "lora rank",
                format!("{rank} not in 1..={}", n_in.min(n_out)),
            ));
        }
        if !scaling.is_finite() || scaling <= 0.0 {
            return Err(Error::invalid("lora scaling", format!("{scaling}")));
        }
        Ok(LoraAdapter {
            rank,
            scaling,
            a: kaiming_init(rank, n_in, stream)?,
            b: Matrix::zeros(n_out, rank),
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    fn factor(&self) -> f64 {
        self.scaling / self.rank as f64
    }

    /// The dense update this adapter represents: `s/r * B A`.
    pub fn delta(&self) -> Result<Matrix> {
        let mut d = self.b.matmul(&self.a)?;
        for v in d.data_mut() {
            *v *= self.factor();
        }
        Ok(d)
    }

    pub fn contribution(&self, x: &Vector) -> Result<Vector> {
        let ax = self.a.matvec(x)?;
        let mut y = self.b.matvec(&ax)?;
        y.scale_in_place(self.factor());
        Ok(y)
    }
}

/// Linear layer whose base weight is frozen; training moves only the
/// adapter factors and the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    pub(crate) base: PlainLinear,
    pub(crate) adapter: LoraAdapter,
}

pub struct LoraGrads {
    pub d_a: Matrix,
    pub d_b: Matrix,
    pub d_bias: Vector,
    pub d_inputs: Vec<Vector>,
}

impl LoraLinear {
    pub fn wrap(base: PlainLinear, rank: usize, scaling: f64, stream: &mut RngStream) -> Result<LoraLinear> {
        let adapter = LoraAdapter::new(base.n_in(), base.n_out(), rank, scaling, stream)?;
        Ok(LoraLinear { base, adapter })
    }

    pub fn base(&self) -> &PlainLinear {
        &self.base
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        let mut y = self.base.forward(x)?;
        let add = self.adapter.contribution(x)?;
        y.add_assign_scaled(&add, 1.0)?;
        Ok(y)
    }

    /// Sum-over-batch gradients for the trainable pieces only; the frozen
    /// base weight receives none by construction.
    pub fn backward_batch(&self, xs: &[Vector], upstreams: &[Vector]) -> Result<LoraGrads> {
        let f = self.adapter.factor();
        let mut d_a = Matrix::zeros(self.adapter.rank, self.base.n_in());
        let mut d_b = Matrix::zeros(self.base.n_out(), self.adapter.rank);
        let mut d_bias = Vector::zeros(self.base.n_out());
        let mut d_inputs = Vec::with_capacity(xs.len());
        for (x, u) in xs.iter().zip(upstreams) {
            d_bias.add_assign_scaled(u, 1.0)?;
            let ax = self.adapter.a.matvec(x)?;
            let btu = self.adapter.b.t_matvec(u)?;
            d_b.add_scaled_outer(u, &ax, f)?;
            d_a.add_scaled_outer(&btu, x, f)?;
            let mut dx = self.base.weight.t_matvec(u)?;
            let mut lora_dx = self.adapter.a.t_matvec(&btu)?;
            lora_dx.scale_in_place(f);
            dx.add_assign_scaled(&lora_dx, 1.0)?;
            d_inputs.push(dx);
        }
        Ok(LoraGrads { d_a, d_b, d_bias, d_inputs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::derive_stream;

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let mut s = derive_stream(60, &[0]);
        let base = PlainLinear::new(6, 4, &mut s).unwrap();
        let lora = LoraLinear::wrap(base.clone(), 2, 1.0, &mut s).unwrap();
        let x = Vector::from_vec(vec![0.3, -1.0, 0.7, 0.0, 2.0, -0.4]);
        assert_eq!(lora.forward(&x).unwrap(), base.forward(&x).unwrap());
    }

    #[test]
    fn delta_matches_hand_product() {
        let mut s = derive_stream(61, &[0]);
        let mut adapter = LoraAdapter::new(3, 2, 2, 4.0, &mut s).unwrap();
        adapter.b = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        adapter.a = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // factor = 4/2 = 2, delta = 2 * I * A
        let d = adapter.delta().unwrap();
        assert_eq!(d.data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn rank_must_fit() {
        let mut s = derive_stream(62, &[0]);
        assert!(LoraAdapter::new(3, 2, 3, 1.0, &mut s).is_err());
        assert!(LoraAdapter::new(3, 2, 0, 1.0, &mut s).is_err());
        assert!(LoraAdapter::new(3, 2, 2, 0.0, &mut s).is_err());
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ln = LayerNorm::new(4);
        let z = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let (y, _) = ln.forward_traced(&z).unwrap();
        let mean = y.mean();
        let var = y.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps keeps it just under 1
    }
}
