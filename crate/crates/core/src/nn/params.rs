use std::collections::{BTreeMap, BTreeSet};

use super::init::{xavier_uniform, Init};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Names are kept sorted so iteration order is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
    seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new(), frozen: BTreeSet::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Xavier-initialized tensors draw from a stream
    /// keyed by the store seed and the parameter name, so a parameter's
    /// initial value does not depend on which other parameters exist.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Invalid(format!("parameter `{name}` declared twice")));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(c) => Tensor::full(shape, T::c(c)),
            Init::Xavier => xavier_uniform::<f64>(shape, name_seed(self.seed, name))?.cast(),
        };
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn declare_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Invalid(format!("buffer `{name}` declared twice")));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| Error::Invalid(format!("unknown buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers.get_mut(name).ok_or_else(|| Error::Invalid(format!("unknown buffer `{name}`")))
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!("`{name}`: expected {:?}, got {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self.params.keys().filter(|n| n.starts_with(prefix)).cloned().collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.keys().filter(|n| !self.frozen.contains(*n)).cloned().collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
            seed: self.seed,
        }
    }

    /// Copies every parameter and buffer whose name appears in `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, v) in other.params() {
            self.set(name, v.clone())?;
        }
        for (name, v) in other.buffers() {
            let slot = self.buffer_mut(name)?;
            if slot.shape() != v.shape() {
                return Err(Error::Shape(format!("buffer `{name}`: expected {:?}, got {:?}", slot.shape(), v.shape())));
            }
            *slot = v.clone();
        }
        Ok(())
    }
}

/// FNV-1a of the name mixed with the store seed.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
