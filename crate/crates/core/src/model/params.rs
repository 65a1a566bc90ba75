use indexmap::IndexMap;

use crate::data::Prng;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::arch::{ArchitectureSpec, LayerKind};

/// Named learnable tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T: Element = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParameterStore<T> {
    fn default() -> Self {
        ParameterStore { entries: IndexMap::new() }
    }
}

impl<T: Element> ParameterStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name:?}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParameterStore<U> {
        ParameterStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParameterStore<T> {
        ParameterStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), Tensor::zeros_like_shape(v.shape()))).collect(),
        }
    }

    /// Checks names, order and shapes against an architecture.
    pub fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        let expected = spec.param_shapes();
        if expected.len() != self.len() {
            return Err(Error::shape(format!(
                "architecture {} has {} parameter tensors, store has {}",
                spec.id(),
                expected.len(),
                self.len()
            )));
        }
        for ((name, dims), (have_name, t)) in expected.iter().zip(self.iter()) {
            if name != have_name || dims.as_slice() != t.dims() {
                return Err(Error::shape(format!(
                    "parameter {have_name} {} does not match expected {name} {dims:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// He-uniform initialisation: weights `U(−b, b)` with `b = sqrt(6 / fan_in)`,
/// `fan_in = Cin·Kh·Kw`; biases zero. Draws come from one SplitMix64 stream
/// in parameter order.
pub fn init_params<T: Element>(spec: &ArchitectureSpec, seed: u64) -> ParameterStore<T> {
    let mut rng = Prng::new(seed);
    let mut store = ParameterStore::new();
    for node in spec.nodes() {
        let Some((wdims, bdims)) = node.kind.param_shapes() else { continue };
        let fan_in = match node.kind {
            LayerKind::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerKind::TransposedConv { in_channels, .. } => in_channels * 4,
            _ => unreachable!("only conv layers carry parameters"),
        };
        let bound = he_bound(fan_in);
        let n: usize = wdims.iter().product();
        let weights = (0..n).map(|_| T::of_f64(bound * (2.0 * rng.next_open01() - 1.0))).collect();
        let weight = Tensor::from_values(&wdims, weights).expect("spec shapes are valid");
        let bias = Tensor::zeros(&bdims).expect("spec shapes are valid");
        store.insert(node.weight_name(), weight).expect("unique node names");
        store.insert(node.bias_name(), bias).expect("unique node names");
    }
    store
}

pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}
