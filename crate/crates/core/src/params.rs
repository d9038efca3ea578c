//! Named parameter storage and deterministic initialization.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tape::{BatchStats, Gradients};
use crate::tensor::{Dims, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid!("duplicate parameter name `{name}`"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, kind, tensor });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Trainable)
    }

    /// Total number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.trainable().map(|(_, p)| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds every parameter gradient from a reverse sweep into the store.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            self.entries[id].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Exponential update of running statistics:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(
        &mut self,
        mean_id: ParamId,
        var_id: ParamId,
        stats: &BatchStats<T>,
        momentum: f64,
    ) {
        let m = T::lit(momentum);
        let k = T::one() - m;
        for (r, &b) in self.entries[mean_id.0].tensor.data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + k * b;
        }
        for (r, &b) in self.entries[var_id.0].tensor.data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + k * b;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, tensor: p.tensor.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Flattened trainable values, in store order.
    pub fn flat_trainable(&self) -> Vec<T> {
        self.trainable().flat_map(|(_, p)| p.tensor.data().iter().copied()).collect()
    }

    /// Flattened trainable gradients (zeros where no gradient was recorded).
    pub fn flat_trainable_grads(&self) -> Vec<T> {
        self.trainable()
            .flat_map(|(_, p)| match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.tensor.numel()],
            })
            .collect()
    }

    /// Inverse of [`flat_trainable`](Self::flat_trainable).
    pub fn set_flat_trainable(&mut self, values: &[T]) -> Result<()> {
        let expected = self.count_trainable();
        if values.len() != expected {
            return Err(invalid!("expected {expected} values, got {}", values.len()));
        }
        let mut offset = 0;
        for p in self.entries.iter_mut().filter(|p| p.kind == ParamKind::Trainable) {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Creates named parameters with He-normal weights drawn from a seeded stream.
///
/// Draws are made in `f64` and then cast, so stores of either precision built
/// from the same seed hold the same values up to rounding.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new() }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` inside a nested naming scope.
    pub fn scoped<R>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.push(scope);
        let out = f(self);
        self.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn he_normal(&mut self, leaf: &str, dims: Dims, fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| invalid!("{e}"))?;
        let data: Vec<T> = (0..dims.numel()).map(|_| T::lit(normal.sample(&mut self.rng))).collect();
        let name = self.full_name(leaf);
        self.store.add(name, ParamKind::Trainable, Tensor::from_vec(dims, data)?)
    }

    /// Multiplies an already-built tensor by `factor`.
    pub fn rescale(&mut self, id: ParamId, factor: f64) {
        let f = T::lit(factor);
        for v in self.store.get_mut(id).tensor.data_mut() {
            *v *= f;
        }
    }

    pub fn constant(&mut self, leaf: &str, len: usize, value: f64, kind: ParamKind) -> Result<ParamId> {
        let name = self.full_name(leaf);
        self.store.add(name, kind, Tensor::vector(vec![T::lit(value); len]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut b = ParamBuilder::new(&mut store, 1);
        b.constant("x", 3, 0.0, ParamKind::Trainable).unwrap();
        assert!(b.constant("x", 3, 0.0, ParamKind::Trainable).is_err());
    }

    #[test]
    fn buffers_are_not_counted() {
        let mut store = ParamStore::<f32>::new();
        let mut b = ParamBuilder::new(&mut store, 1);
        b.scoped("bn", |b| {
            b.constant("gamma", 4, 1.0, ParamKind::Trainable)?;
            b.constant("running_mean", 4, 0.0, ParamKind::Buffer)
        })
        .unwrap();
        assert_eq!(store.count_trainable(), 4);
        assert!(store.id_of("bn.gamma").is_some());
    }

    #[test]
    fn he_normal_is_seeded() {
        let draw = |seed| {
            let mut store = ParamStore::<f64>::new();
            ParamBuilder::new(&mut store, seed).he_normal("w", Dims::new(8, 4, 3, 3), 36).unwrap();
            store.flat_trainable()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
        let v = draw(5);
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 2.0 / 36.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut store = ParamStore::<f64>::new();
        let mut b = ParamBuilder::new(&mut store, 0);
        let m = b.constant("m", 1, 0.0, ParamKind::Buffer).unwrap();
        let v = b.constant("v", 1, 1.0, ParamKind::Buffer).unwrap();
        store.update_running_stats(m, v, &BatchStats { mean: vec![1.0], var: vec![3.0] }, 0.9);
        assert!((store.tensor(m).data()[0] - 0.1).abs() < 1e-12);
        assert!((store.tensor(v).data()[0] - 1.2).abs() < 1e-12);
    }
}
