use serde::{Deserialize, Serialize};

use super::params::{GradVector, ParamVector};
use crate::error::{Error, Result};

fn check_lengths(params: &ParamVector, grad: &GradVector, mask: &[bool]) -> Result<()> {
    if grad.len() != params.len() || mask.len() != params.len() {
        return Err(Error::config(format!(
            "length mismatch: params {}, grad {}, mask {}",
            params.len(),
            grad.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// `θ_j ← θ_j − lr · g_j · m_j`. Coordinates with `m_j = 0` are untouched.
pub fn apply_masked_step(
    params: &mut ParamVector,
    grad: &GradVector,
    mask: &[bool],
    lr: f64,
) -> Result<()> {
    check_lengths(params, grad, mask)?;
    for ((p, g), &m) in params.values_mut().iter_mut().zip(&grad.values).zip(mask) {
        if m {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// Adam whose moments and updates are restricted to the active mask.
///
/// Inactive coordinates keep both their value and their moment estimates,
/// so a coordinate that is never active never moves.
#[derive(Debug, Clone)]
pub struct MaskedAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u32>,
}

impl MaskedAdam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: vec![0; len],
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &GradVector, mask: &[bool]) -> Result<()> {
        check_lengths(params, grad, mask)?;
        if self.m.len() != params.len() {
            return Err(Error::config("optimizer state length mismatch"));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for (j, p) in params.values_mut().iter_mut().enumerate() {
            if !mask[j] {
                continue;
            }
            let g = grad.values[j];
            self.steps[j] += 1;
            let t = self.steps[j] as i32;
            self.m[j] = b1 * self.m[j] + (1.0 - b1) * g;
            self.v[j] = b2 * self.v[j] + (1.0 - b2) * g * g;
            let mh = self.m[j] / (1.0 - b1.powi(t));
            let vh = self.v[j] / (1.0 - b2.powi(t));
            *p -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(MaskedAdam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(MaskedAdam::new(len, lr)),
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &GradVector, mask: &[bool]) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => apply_masked_step(params, grad, mask, *lr),
            Optimizer::Adam(adam) => adam.step(params, grad, mask),
        }
    }
}
