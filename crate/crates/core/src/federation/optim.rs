use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FusionModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Heavy-ball momentum for SGD; first-moment decay for Adam.
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum: 0.0,
            ..OptimizerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.momentum) || !unit(self.beta2) || !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::arg(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Fresh optimizer state for one client update.
    pub fn build(&self) -> Box<dyn Optimizer> {
        match self.kind {
            OptimizerKind::Sgd => Box::new(Sgd::new(self.momentum)),
            OptimizerKind::Adam => Box::new(Adam::new(self.momentum, self.beta2, self.eps)),
        }
    }
}

/// Applies the gradients held in the parameters' grad slots.
pub trait Optimizer: Send {
    fn step(&mut self, params: &mut FusionModelParams, lr: f64) -> Result<()>;
}

fn trainable_grads(params: &mut FusionModelParams) -> Vec<(&mut [f32], Vec<f64>)> {
    params
        .tensors_with_roles_mut()
        .into_iter()
        .filter(|(role, _)| role.is_trainable())
        .map(|(_, t)| {
            let g: Vec<f64> = match t.grad() {
                Some(g) => g.iter().map(|&v| v as f64).collect(),
                None => vec![0.0; t.len()],
            };
            (t.data_mut(), g)
        })
        .collect()
}

fn check_finite(w: &[f32]) -> Result<()> {
    match w.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// `w ← w − η·v`, `v ← μ·v + g`; plain gradient descent when `μ = 0`.
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut FusionModelParams, lr: f64) -> Result<()> {
        let tensors = trainable_grads(params);
        if self.velocity.is_empty() && self.momentum > 0.0 {
            self.velocity = tensors.iter().map(|(w, _)| vec![0.0; w.len()]).collect();
        }
        for (k, (w, g)) in tensors.into_iter().enumerate() {
            if self.momentum > 0.0 {
                let v = &mut self.velocity[k];
                for ((wi, gi), vi) in w.iter_mut().zip(&g).zip(v.iter_mut()) {
                    *vi = self.momentum * *vi + gi;
                    *wi = (*wi as f64 - lr * *vi) as f32;
                }
            } else {
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi = (*wi as f64 - lr * gi) as f32;
                }
            }
            check_finite(w)?;
        }
        Ok(())
    }
}

/// Adaptive moments with bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut FusionModelParams, lr: f64) -> Result<()> {
        let tensors = trainable_grads(params);
        if self.m.is_empty() {
            self.m = tensors.iter().map(|(w, _)| vec![0.0; w.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (w, g)) in tensors.into_iter().enumerate() {
            for (i, (wi, gi)) in w.iter_mut().zip(&g).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *wi = (*wi as f64 - update) as f32;
            }
            check_finite(w)?;
        }
        Ok(())
    }
}

/// Step decay: `lr · factor^⌊round / interval⌋`.
pub fn scheduled_lr(base: f64, factor: f64, interval: usize, round: usize) -> f64 {
    if interval == 0 {
        return base;
    }
    base * factor.powi((round / interval) as i32)
}
