//! Named parameter and state storage, shared by the optimizers and the
//! checkpoint code.
//!
//! Trainable entries (kernels, biases, batchnorm gamma/beta) receive
//! gradients; non-trainable entries (batchnorm running statistics and
//! their population counter) are plain state carried alongside. Entry
//! order is the creation order of the model builder and is part of the
//! determinism contract.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of one entry in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<E> {
    pub name: String,
    pub value: Tensor<E>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<E> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("params", format!("duplicate parameter name {:?}", name)));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<E> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<E>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of trainable scalar values.
    pub fn count_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.shape().numel()).sum()
    }

    /// Convert every entry to another precision (used to run gradient
    /// checks on an f64 copy of an f32 model).
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}
