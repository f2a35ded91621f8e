//! Named parameter storage and the AdamW optimizer.
//!
//! Parameter values are kept exactly representable in `f32` (they are rounded
//! after initialisation and after every update) while all arithmetic runs in
//! `f64`. That way a checkpoint written as little-endian `f32` reloads to the
//! bit-identical model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Matrix,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        value.round_to_f32();
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value, trainable: true });
        id
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)`.
    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let std = 1.0 / (rows as f64).sqrt();
        self.add_normal_std(name, rows, cols, std, rng)
    }

    pub fn add_normal_std(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let value = Matrix::from_fn(rows, cols, |_, _| normal.sample(rng));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::filled(rows, cols, 1.0))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    /// Overwrite a value; the caller is responsible for keeping the shape.
    pub fn set_value(&mut self, id: ParamId, mut value: Matrix) {
        assert_eq!(value.shape(), self.entries[id.0].value.shape(), "parameter shape change");
        value.round_to_f32();
        self.entries[id.0].value = value;
    }

    /// Unrounded write, used by finite-difference probes.
    pub fn value_mut_raw(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` must be sorted by id for deterministic moment order;
    /// parameters without a gradient this step still decay only if they have
    /// been seen before (matching frameworks that skip `None` grads).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let mut value = store.value(*id).clone();
            for (((w, gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set_value(*id, value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_f32_representable() {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::row_vector(&[0.1, 1.0 / 3.0]));
        for v in s.value(id).data() {
            assert_eq!(*v, *v as f32 as f64);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::row_vector(&[1.0, -1.0]));
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut s, &[(id, Matrix::row_vector(&[2.0, -0.5]))]);
        let v = s.value(id);
        assert!((v.get(0, 0) - 0.99).abs() < 1e-6);
        assert!((v.get(0, 1) + 0.99).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = ParamStore::new();
        let id = s.add("brains.w", Matrix::row_vector(&[1.0]));
        s.set_trainable_prefix("brains.", false);
        let mut opt = AdamW::new(0.1, 0.05);
        opt.step(&mut s, &[(id, Matrix::row_vector(&[1.0]))]);
        assert_eq!(s.value(id).item(), 1.0);
    }
}
