use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adaptive-moment hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Named learnable tensors plus their optimizer moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor under a fresh name and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.first_moment.push(vec![0.0; tensor.numel()]);
        self.second_moment.push(vec![0.0; tensor.numel()]);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Rebuilds a set from stored parts (checkpoint loading).
    pub fn from_parts(
        names: Vec<String>,
        tensors: Vec<Tensor>,
        first_moment: Vec<Vec<f64>>,
        second_moment: Vec<Vec<f64>>,
        step: u64,
    ) -> Result<Self> {
        let n = names.len();
        if tensors.len() != n || first_moment.len() != n || second_moment.len() != n {
            return Err(Error::Load("parameter part counts disagree".into()));
        }
        for ((t, m), v) in tensors.iter().zip(&first_moment).zip(&second_moment) {
            if m.len() != t.numel() || v.len() != t.numel() {
                return Err(Error::Load("moment buffer size mismatch".into()));
            }
        }
        Ok(Self {
            names,
            tensors,
            first_moment,
            second_moment,
            step,
        })
    }

    /// Records every tensor as a leaf on `tape`, in slot order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// One adaptive-moment update from the gradients accumulated on `tape` for
    /// `vars` (as returned by [`ParamSet::bind`]). Slots with no gradient keep
    /// their value and moments. Tape gradients are zeroed afterwards.
    pub fn adam_step(&mut self, tape: &mut Tape, vars: &[Var], cfg: &AdamConfig) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "adam_step: {} vars bound for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        if !self.tensors.is_empty() && vars.iter().all(|v| tape.grad(*v).is_none()) {
            return Err(Error::Contract("adam_step: no gradients populated".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (slot, var) in vars.iter().enumerate() {
            let Some(grad) = tape.grad(*var) else { continue };
            let m = &mut self.first_moment[slot];
            let v = &mut self.second_moment[slot];
            let p = self.tensors[slot].data_mut();
            for i in 0..p.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        tape.zero_grads();
        Ok(())
    }
}
