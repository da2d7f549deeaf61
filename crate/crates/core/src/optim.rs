//! Parameters and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor and its most recent gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value,
            grad: None,
        }
    }
}

/// Records every parameter as a grad-requiring leaf; handles come back in order.
pub fn bind(tape: &mut Tape, params: &[Parameter]) -> Vec<Var> {
    params.iter().map(|p| tape.param(p.value.clone())).collect()
}

/// Adds the gradients for `vars` into the parameters' grad buffers.
///
/// Parameters that did not influence the loss receive an explicit zero gradient.
pub fn accumulate(params: &mut [Parameter], vars: &[Var], grads: &Gradients) {
    for (p, &v) in params.iter_mut().zip(vars) {
        let g = grads.get(v);
        match (&mut p.grad, g) {
            (Some(acc), Some(g)) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            (slot @ None, Some(g)) => *slot = Some(g.clone()),
            (slot @ None, None) => {
                *slot = Some(p.value.map(|_| 0.0));
            }
            (Some(_), None) => {}
        }
    }
}

pub fn zero_grad(params: &mut [Parameter]) {
    for p in params {
        p.grad = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers persist across [`Adam::step`] calls
/// and are matched to parameters by position.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::contract(format!("parameter {} has no gradient", p.name)));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return Err(Error::contract("parameter set changed between Adam steps"));
        }
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.steps as i32);
        let bias2 = 1.0 - beta2.powi(self.steps as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.as_ref().expect("checked above");
            for (((x, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
