//! Named parameter storage, initialization helpers and the Adam optimizer.

use std::collections::{BTreeSet, HashMap};

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Gradients, Tape, Var};
use crate::{Error, Result, Scalar};

/// Ordered collection of named `Array2` parameters.
///
/// Iteration order is insertion order, which keeps serialization and
/// optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: IndexMap<String, Array2<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not present")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not present")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::lit(x.as_f64()))))
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Uniform in `±1/√fan_in`, the usual default for linear layers.
pub fn fan_in_uniform<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array2::from_shape_simple_fn((rows, cols), || T::lit(dist.sample(rng)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Parameters named in `frozen` are never touched.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub first: ParamStore<T>,
    pub second: ParamStore<T>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: ParamStore::new(),
            second: ParamStore::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn freeze(&mut self, name: impl Into<String>) {
        self.frozen.insert(name.into());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, vars: &ParamVars, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::lit(lr);
        let eps = T::lit(self.cfg.eps);
        for (name, value) in params.tensors.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            let Some(g) = vars.try_get(name).and_then(|v| grads.get(v)) else {
                continue;
            };
            let m = self
                .first
                .tensors
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(value.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (T::one() - b1) * g);
            let v = self
                .second
                .tensors
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(value.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
            let m = &self.first.tensors[name];
            let v = &self.second.tensors[name];
            ndarray::Zip::from(value).and(m).and(v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
