use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameters plus non-trainable buffers (running statistics).
///
/// Names are stable and sorted, so iteration order is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tag: String,
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(tag: impl Into<String>) -> Self {
        Self { tag: tag.into(), params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    /// Identifies the store inside a graph, so two stores may share parameter names.
    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn with_tag(&self, tag: impl Into<String>) -> Self {
        Self { tag: tag.into(), params: self.params.clone(), buffers: self.buffers.clone() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(
            self.buffers.insert(name.clone(), value).is_none(),
            "duplicate buffer {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    /// Looks up a parameter, panicking with its name if it was never registered.
    pub fn expect(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{}` missing from store `{}`", name, self.tag))
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) {
        let slot = self
            .buffers
            .get_mut(name)
            .unwrap_or_else(|| panic!("buffer `{}` missing from store `{}`", name, self.tag));
        assert_eq!(slot.shape(), value.shape(), "buffer `{name}` shape changed");
        *slot = value;
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters and buffers whose names start with `prefix`, in a new store.
    pub fn subset(&self, prefix: &str) -> Self {
        let pick = |m: &BTreeMap<String, Tensor<T>>| {
            m.iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        Self { tag: self.tag.clone(), params: pick(&self.params), buffers: pick(&self.buffers) }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |m: &BTreeMap<String, Tensor<T>>| {
            m.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect()
        };
        ParamStore { tag: self.tag.clone(), params: conv(&self.params), buffers: conv(&self.buffers) }
    }

    /// `(name, shape)` of every parameter, for topology comparisons.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }
}
