use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Named parameters with matching gradient accumulators.
///
/// Names are kept in sorted order so iteration, initialization and
/// serialization are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor2D>,
    grads: BTreeMap<String, Tensor2D>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.grads
            .insert(name.clone(), Tensor2D::zeros(value.rows(), value.cols()));
        self.values.insert(name, value);
        Ok(())
    }

    /// Xavier-uniform initialization.
    pub fn insert_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let value = Tensor2D::from_fn(rows, cols, |_, _| dist.sample(rng));
        self.insert(name, value)
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
        let value = Tensor2D::from_fn(rows, cols, |_, _| dist.sample(rng));
        self.insert(name, value)
    }

    pub fn insert_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> Result<()> {
        self.insert(name, Tensor2D::filled(rows, cols, v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        self.values.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor2D> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.values().map(Tensor2D::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn increment_step(&mut self) {
        self.step += 1;
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor2D) -> Result<()> {
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != g.shape() {
            return Err(Error::ParamShape {
                name: name.to_string(),
                found: g.shape(),
                expected: slot.shape(),
            });
        }
        slot.add_assign(g);
        Ok(())
    }

    /// Scales every gradient accumulator by `k`.
    pub fn scale_grads(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn scale_grad(&mut self, name: &str, k: f64) {
        if let Some(g) = self.grads.get_mut(name) {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, value) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            match self.values.get_mut(name) {
                Some(slot) if slot.shape() == value.shape() => *slot = value.clone(),
                Some(slot) => {
                    return Err(Error::ParamShape {
                        name: name.to_string(),
                        found: value.shape(),
                        expected: slot.shape(),
                    })
                }
                None => self.insert(name, value.clone())?,
            }
        }
        Ok(())
    }

    /// Keeps only parameters whose names start with one of `prefixes`.
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        let keep = |n: &String| prefixes.iter().any(|p| n.starts_with(p));
        self.values.retain(|n, _| keep(n));
        self.grads.retain(|n, _| keep(n));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_grads_match_shapes() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor2D::zeros(2, 3)).unwrap();
        assert!(matches!(
            store.insert("a", Tensor2D::zeros(1, 1)),
            Err(Error::DuplicateParam(_))
        ));
        assert_eq!(store.grad("a").unwrap().shape(), (2, 3));
        assert!(store.accumulate_grad("a", &Tensor2D::zeros(3, 2)).is_err());
    }
}
