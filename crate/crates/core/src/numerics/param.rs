use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Frozen parameters are read as constants and never updated.
    pub frozen: bool,
}

/// All parameters of a model, keyed by dot-separated path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        if name.is_empty() || !name.is_ascii() {
            return Err(Error::Config(format!("invalid parameter name {name:?}")));
        }
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                name: name.to_string(),
                value,
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in self.params.values_mut() {
            if p.name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    /// Copies values (not frozen flags) of all parameters under `prefix`
    /// from `other`.
    pub fn load_prefix(&mut self, other: &ParamStore<S>, prefix: &str) -> Result<()> {
        for p in self.params.values_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = other
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::dim("load_prefix", p.value.shape(), src.value.shape()));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Replaces every value with one of the same name in `other`; shapes
    /// and the parameter set must match exactly.
    pub fn load_all(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: have {}, loading {}",
                self.len(),
                other.len()
            )));
        }
        self.load_prefix(other, "")
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            name: p.name.clone(),
                            value: p.value.cast(),
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct ParamInit<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, S: Scalar> ParamInit<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<String> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::lit(dist.sample(self.rng))).collect();
        self.store.insert(name, Tensor::from_vec(shape, data)?)?;
        Ok(name.to_string())
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<String> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::lit(self.rng.gen_range(-bound..=bound)))
            .collect();
        self.store.insert(name, Tensor::from_vec(shape, data)?)?;
        Ok(name.to_string())
    }

    pub fn constant(&mut self, name: &str, value: Tensor<S>) -> Result<String> {
        self.store.insert(name, value)?;
        Ok(name.to_string())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<String> {
        self.constant(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<String> {
        self.constant(name, Tensor::ones(shape))
    }
}
