use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug)]
struct Entry {
    value: Tensor,
    grad: Option<Tensor>,
    trainable: bool,
}

/// Named parameters with their gradients and a trainable mask.
///
/// Iteration order is the lexical order of names, which keeps optimizer
/// updates and serialization deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(
            name.into(),
            Entry {
                value,
                grad: None,
                trainable,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        entry.trainable = trainable;
        Ok(())
    }

    /// Marks every parameter as frozen.
    pub fn freeze_all(&mut self) {
        for entry in self.entries.values_mut() {
            entry.trainable = false;
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(|e| e.grad.as_ref())
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if entry.value.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "set_grad",
                lhs: entry.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        entry.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad = None;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values across parameters selected by `filter`.
    pub fn count_values(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Moves every parameter of `other` into `self`, replacing clashes.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    pub(crate) fn for_each_trainable_mut(
        &mut self,
        mut f: impl FnMut(&str, &mut Tensor, Option<&Tensor>) -> Result<()>,
    ) -> Result<()> {
        for (name, entry) in self.entries.iter_mut() {
            if entry.trainable {
                f(name, &mut entry.value, entry.grad.as_ref())?;
            }
        }
        Ok(())
    }
}
