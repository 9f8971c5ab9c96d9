use std::collections::BTreeMap;

use crate::scalar::Scalar;

use super::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub trainable: bool,
    /// Optimizer group tag.
    pub group: String,
}

/// Named parameter registry. Names are `/`-separated paths.
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

    pub fn insert(&mut self, name: &str, value: Tensor<S>, trainable: bool, group: &str) {
        self.params.insert(
            name.to_string(),
            Param {
                value,
                trainable,
                group: group.to_string(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Snapshot of all values in one group, for bit-equality checks.
    pub fn group_values(&self, group: &str) -> BTreeMap<String, Vec<S>> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(k, p)| (k.clone(), p.value.data().to_vec()))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}
