//! Named trainable parameters and the AdamW optimizer state that travels
//! with them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// First moment estimate.
    pub m: Tensor,
    /// Second moment estimate.
    pub v: Tensor,
}

/// Ordered collection of parameters. Iteration order is insertion order,
/// which fixes the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let [r, c] = value.shape();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the gradients of every parameter bound on `tape` into the
    /// parameter's gradient buffer. Repeated calls sum.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (name, var) in tape.bound_params() {
            let Some(g) = grads.get(var) else { continue };
            let i = *self
                .index
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            let p = &mut self.params[i];
            match &mut p.grad {
                Some(existing) => existing.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Scales every populated gradient.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Gives every parameter without a gradient an all-zero one, for
    /// parameters the current loss does not reach.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.rows(), p.value.cols()));
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// One AdamW update with decoupled weight decay:
    ///
    /// ```text
    /// p <- p - lr * wd * p
    /// m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
    /// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    /// ```
    ///
    /// Every parameter must carry a gradient; nothing is modified otherwise.
    /// Gradients are cleared afterwards.
    pub fn adamw_step(&mut self, cfg: &AdamWConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let g = p.grad.take().expect("checked above");
            let values = p.value.data_mut();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for i in 0..values.len() {
                values[i] -= cfg.lr * cfg.weight_decay * values[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g.data()[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g.data()[i] * g.data()[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
