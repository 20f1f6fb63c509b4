use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable parameters plus non-trainable buffers (spectral-norm
/// power-iteration vectors). Keys are module paths such as
/// `gen_ab.enc.down1.weight`; iteration order is sorted by key.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.params.contains_key(&name), "duplicate parameter {name}");
        self.params.insert(name, value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.params.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> &Tensor<T> {
        self.buffers.get(name).unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.buffers.get_mut(name).unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn contains_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameter names starting with `prefix`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.params.keys().filter(move |k| k.starts_with(prefix))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// A graph plus the parameters bound into it.
///
/// Parameters are copied into the graph as leaves on first use, so the store
/// can be mutated between binding phases. A parameter used several times in
/// one forward pass is bound once and its gradient accumulates.
pub struct Session<T> {
    pub graph: Graph<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<T: Scalar> Session<T> {
    /// `trainable` decides whether parameters bound from now on receive
    /// gradients.
    pub fn new(trainable: bool) -> Self {
        Self { graph: Graph::new(), bound: BTreeMap::new(), trainable }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.graph.leaf(store.param(name).clone(), self.trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}
