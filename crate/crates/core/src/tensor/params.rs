//! Named parameter tensors and Adam state.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::Tensor;
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// The model parameters θ plus per-parameter optimizer moments.
///
/// Insertion order is the canonical order for iteration and serialization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
    pending_grads: bool,
}

/// Raw optimizer state, exposed for checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let n = tensor.numel();
        let id = ParamId(self.entries.len());
        let mut tensor = tensor;
        tensor.requires_grad = true;
        tensor.grad = None;
        self.entries.push(Entry { name: name.to_string(), tensor, m: vec![0.0; n], v: vec![0.0; n] });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn try_get(&self, id: ParamId) -> Result<&Tensor> {
        self.entries
            .get(id.0)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParameter(alloc::format!("#{}", id.0)))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Overwrite parameter values; the shape is immutable.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.entries[id.0].tensor;
        if values.len() != t.values.len() {
            return Err(Error::DimensionMismatch { expected: t.values.len(), got: values.len() });
        }
        t.values.copy_from_slice(values);
        Ok(())
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].tensor.values
    }

    /// Add gradients from one backward pass into the `grad` buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let t = &mut self.entries[id.0].tensor;
            let buf = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            self.pending_grads = true;
        }
    }

    pub fn has_grads(&self) -> bool {
        self.pending_grads
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
        self.pending_grads = false;
    }

    pub fn grad_norm(&self) -> f64 {
        let s: f64 = self
            .entries
            .iter()
            .filter_map(|e| e.tensor.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum();
        math::sqrt(s)
    }

    /// Rescale gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for e in &mut self.entries {
                if let Some(g) = &mut e.tensor.grad {
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        norm
    }

    /// One Adam update with bias correction, then zero the gradients.
    /// Parameters without a gradient this step are left untouched.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if !self.pending_grads {
            return Err(Error::StepBeforeBackward);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        for e in &mut self.entries {
            let g = match e.tensor.grad.take() {
                Some(g) => g,
                None => continue,
            };
            for i in 0..g.len() {
                e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
                e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                e.tensor.values[i] -= lr * mhat / (math::sqrt(vhat) + cfg.eps);
            }
            if e.tensor.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        self.pending_grads = false;
        Ok(())
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            first_moments: self.entries.iter().map(|e| e.m.clone()).collect(),
            second_moments: self.entries.iter().map(|e| e.v.clone()).collect(),
        }
    }

    pub fn set_optimizer_state(&mut self, state: OptimizerState) -> Result<()> {
        if state.first_moments.len() != self.entries.len() || state.second_moments.len() != self.entries.len() {
            return Err(Error::DimensionMismatch { expected: self.entries.len(), got: state.first_moments.len() });
        }
        for (e, (m, v)) in self.entries.iter_mut().zip(state.first_moments.into_iter().zip(state.second_moments)) {
            if m.len() != e.m.len() || v.len() != e.v.len() {
                return Err(Error::DimensionMismatch { expected: e.m.len(), got: m.len() });
            }
            e.m = m;
            e.v = v;
        }
        self.step = state.step;
        Ok(())
    }

    /// Forget all moments and the step count; used between training phases.
    pub fn reset_optimizer(&mut self) {
        for e in &mut self.entries {
            e.m.iter_mut().for_each(|x| *x = 0.0);
            e.v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.step = 0;
    }

    /// Checksum over names, shapes and the exact bits of every value.
    pub fn checksum(&self) -> u64 {
        let mut h = 0u64;
        for e in &self.entries {
            let bytes = e
                .name
                .bytes()
                .chain(e.tensor.shape.iter().flat_map(|d| (*d as u64).to_le_bytes()))
                .chain(e.tensor.values.iter().flat_map(|v| v.to_bits().to_le_bytes()))
                .chain(h.to_le_bytes());
            h = math::fnv1a(bytes);
        }
        h
    }

    /// Copy values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::DimensionMismatch { expected: self.entries.len(), got: other.entries.len() });
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape != b.tensor.shape {
                return Err(Error::UnknownParameter(b.name.clone()));
            }
            a.tensor.values.copy_from_slice(&b.tensor.values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.add("w", Tensor::zeros(vec![2])).unwrap();
        assert_eq!(s.add("w", Tensor::zeros(vec![2])), Err(Error::DuplicateParameter("w".into())));
    }

    #[test]
    fn step_before_backward_is_an_error() {
        let mut s = ParameterStore::new();
        s.add("w", Tensor::zeros(vec![2])).unwrap();
        assert_eq!(s.adam_step(0.1, &AdamConfig::default()), Err(Error::StepBeforeBackward));
    }

    fn grad_of_sum_sq(store: &ParameterStore, id: ParamId) -> Gradients {
        let mut tape = Tape::with_store(store);
        let w = tape.param(id).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap()
    }

    #[test]
    fn zero_grads_leave_parameters_unchanged() {
        let mut s = ParameterStore::new();
        let id = s.add("w", Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
        let g = grad_of_sum_sq(&s, id);
        s.accumulate(&g);
        let before = s.get(id).values.clone();
        s.adam_step(0.1, &AdamConfig::default()).unwrap();
        assert_eq!(s.get(id).values, before);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut s = ParameterStore::new();
        let id = s.add("w", Tensor::scalar(1.0)).unwrap();
        let mut prev = 1.0;
        for _ in 0..200 {
            let mut tape = Tape::with_store(&s);
            let w = tape.param(id).unwrap();
            let l = tape.scale(w, 3.0).unwrap(); // dl/dw = 3
            let l = tape.sum(l).unwrap();
            let g = tape.backward(l).unwrap();
            s.accumulate(&g);
            s.adam_step(1e-2, &AdamConfig::default()).unwrap();
            let now = s.get(id).values[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let init: Vec<f64> = (0..10).map(|_| crate::rng::normal(&mut rng)).collect();
        let mut s = ParameterStore::new();
        let id = s.add("w", Tensor::new(vec![10], init).unwrap()).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            let g = grad_of_sum_sq(&s, id);
            s.accumulate(&g);
            s.adam_step(1e-2, &AdamConfig::default()).unwrap();
            loss = s.get(id).values.iter().map(|x| x * x).sum();
        }
        assert!(loss < 1e-6, "loss {loss}");
    }
}
