//! Named trainable parameters.
//!
//! A `ParameterSet` is an ordered map from name to tensor plus a record of how
//! each tensor was (or would be) initialized. BTreeMap keeps iteration order
//! deterministic, which matters everywhere the set is walked: optimizer
//! updates, checkpoint serialization, and gradient-check sampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::init::glorot_uniform;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// How a parameter came to hold its values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitSpec {
    /// Glorot uniform from the named substream of the given root seed.
    Glorot { seed: u64 },
    Zeros,
    Constant(f64),
    /// Values restored from a checkpoint; the original spec is not kept.
    Restored,
}

#[derive(Clone, Debug)]
struct Param {
    value: Tensor,
    init: InitSpec,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, init: InitSpec) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Data(format!("parameter `{name}` already defined")));
        }
        self.params.insert(name.to_string(), Param { value, init });
        Ok(())
    }

    /// Glorot-initialized parameter. The draw stream is derived from the root
    /// seed and the parameter name, so insertion order is irrelevant.
    pub fn insert_glorot(&mut self, name: &str, shape: &[usize], root_seed: u64) -> Result<()> {
        let mut stream = rng::substream(root_seed, &format!("init/{name}"));
        let value = glorot_uniform(shape, &mut stream);
        self.insert(name, value, InitSpec::Glorot { seed: root_seed })
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape), InitSpec::Zeros)
    }

    pub fn insert_constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let len: usize = shape.iter().product();
        let t = Tensor::from_shape(shape, vec![value; len])?;
        self.insert(name, t, InitSpec::Constant(value))
    }

    /// Parameter restored from a checkpoint.
    pub fn insert_restored(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, InitSpec::Restored)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))
    }

    pub fn init_spec(&self, name: &str) -> Result<&InitSpec> {
        self.params
            .get(name)
            .map(|p| &p.init)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))
    }

    /// Replaces the values of an existing parameter. The shape is frozen at
    /// insertion; a mismatch is an error, not a resize.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))?;
        if param.value.shape() != value.shape() {
            return Err(Error::dimension(
                format!("set_value({name})"),
                format!("{:?} vs stored {:?}", value.shape(), param.value.shape()),
            ));
        }
        param.value = value;
        Ok(())
    }

    /// In-place elementwise update, used by the optimizer.
    pub fn update_value(&mut self, name: &str, f: impl FnOnce(&mut [f64])) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))?;
        f(param.value.data_mut());
        if !param.value.all_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}` after update")));
        }
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// (name, tensor) pairs in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, p)| (n.as_str(), &p.value))
    }

    /// Number of parameters (tensors, not scalars).
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}
