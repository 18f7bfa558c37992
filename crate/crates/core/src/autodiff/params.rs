use std::collections::BTreeMap;

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
struct OptState {
    velocity: Option<Vec<f64>>,
    adam_m: Option<Vec<f64>>,
    adam_v: Option<Vec<f64>>,
    adam_t: u64,
}

/// Named parameters plus per-parameter optimizer state.
///
/// Tensors with `requires_grad == false` are buffers (running statistics,
/// normalisation constants): they are checkpointed but never optimised.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    state: BTreeMap<String, OptState>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd { lr: 1e-3, momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable parameter.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_grad());
    }

    /// Inserts a non-trainable buffer.
    pub fn insert_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor) {
        tensor.requires_grad = false;
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::contract(format!("parameter {name:?} missing")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let t = self.tensors.get_mut(name).ok_or_else(|| Error::contract(format!("parameter {name:?} missing")))?;
        t.requires_grad = trainable;
        Ok(())
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (name, t) in &other.tensors {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Entries whose names start with `prefix`, names kept, optimiser state dropped.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let tensors = self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect();
        ParamStore { tensors, state: BTreeMap::new() }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore {
        let tensors = self.tensors.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone()))).collect();
        ParamStore { tensors, state: BTreeMap::new() }
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad = if t.requires_grad { Some(vec![0.0; t.numel()]) } else { None };
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad = None;
        }
    }

    /// Adds tape gradients into the stored `grad` buffers.
    pub fn accumulate_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.param_grads() {
            let t = self.tensors.get_mut(&name).ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name:?}")))?;
            if g.len() != t.numel() {
                return Err(Error::dim(format!("gradient for {name:?} has {} entries, tensor has {}", g.len(), t.numel())));
            }
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Euclidean norm over every stored gradient.
    pub fn grad_norm(&self) -> f64 {
        self.tensors.values().filter_map(|t| t.grad.as_ref()).flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    fn check_grads(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if t.requires_grad && t.grad.is_none() {
                return Err(Error::contract(format!("parameter {name:?} has no gradient")));
            }
        }
        Ok(())
    }

    /// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
    pub fn sgd_step(&mut self, opt: &Sgd) -> Result<()> {
        self.check_grads()?;
        for (name, t) in self.tensors.iter_mut() {
            if !t.requires_grad {
                continue;
            }
            let grad = t.grad.take().expect("checked above");
            let state = self.state.entry(name.clone()).or_default();
            let v = state.velocity.get_or_insert_with(|| vec![0.0; grad.len()]);
            let w = t.data_mut();
            for i in 0..w.len() {
                v[i] = opt.momentum * v[i] + (grad[i] + opt.weight_decay * w[i]);
                w[i] -= opt.lr * v[i];
            }
            t.grad = Some(grad);
        }
        Ok(())
    }

    /// Bias-corrected Adam.
    pub fn adam_step(&mut self, opt: &Adam) -> Result<()> {
        self.check_grads()?;
        for (name, t) in self.tensors.iter_mut() {
            if !t.requires_grad {
                continue;
            }
            let grad = t.grad.take().expect("checked above");
            let state = self.state.entry(name.clone()).or_default();
            state.adam_t += 1;
            let step = state.adam_t as i32;
            let m = state.adam_m.get_or_insert_with(|| vec![0.0; grad.len()]);
            let v = state.adam_v.get_or_insert_with(|| vec![0.0; grad.len()]);
            let bc1 = 1.0 - opt.beta1.powi(step);
            let bc2 = 1.0 - opt.beta2.powi(step);
            let w = t.data_mut();
            for i in 0..w.len() {
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grad[i];
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }

    /// Adam step count for `name` (0 before the first step).
    pub fn adam_steps(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.adam_t)
    }

    /// Rounds every value to the nearest `f32`, the checkpoint payload precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}
