//! First-order optimizers over named parameter vectors.

use crate::error::{Error, Result};
use crate::model::params::ParamVector;

fn check_lr(lr: f64) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::invalid("learning rate", format!("{lr}")));
    }
    Ok(())
}

/// Plain gradient descent: `p <- p - lr * g`.
pub fn sgd_step(params: &mut ParamVector, grads: &ParamVector, lr: f64) -> Result<()> {
    check_lr(lr)?;
    params.add_assign_scaled(grads, -lr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> AdamParams {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-coordinate moment estimates; the layout is frozen at construction
/// and every step checks both arguments against it.
#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    layout: ParamVector,
}

impl AdamState {
    pub fn new(like: &ParamVector) -> AdamState {
        let mut layout = like.clone();
        layout.scale_in_place(0.0);
        AdamState { t: 0, m: vec![0.0; like.total_len()], v: vec![0.0; like.total_len()], layout }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamVector, grads: &ParamVector, hp: &AdamParams) -> Result<()> {
        check_lr(hp.lr)?;
        self.layout.require_same_layout(params, "adam step params")?;
        self.layout.require_same_layout(grads, "adam step grads")?;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (idx, (p, g)) in params.values_mut().zip(grads.values()).enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * *g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * *g * *g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
        Ok(())
    }
}

/// Which optimizer a training loop should build for each local pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn build(self, like: &ParamVector, lr: f64) -> Optimizer {
        match self {
            OptimizerKind::Sgd => Optimizer::sgd(lr),
            OptimizerKind::Adam => Optimizer::adam(like, lr),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// A unified handle so training loops can run either optimizer.
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { state: AdamState, hp: AdamParams },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer::Sgd { lr }
    }

    pub fn adam(like: &ParamVector, lr: f64) -> Optimizer {
        Optimizer::Adam { state: AdamState::new(like), hp: AdamParams::with_lr(lr) }
    }

    pub fn step(&mut self, params: &mut ParamVector, grads: &ParamVector) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr),
            Optimizer::Adam { state, hp } => state.step(params, grads, hp),
        }
    }
}
