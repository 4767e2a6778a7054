//! Named tensor stores for trainable parameters and non-trainable buffers.

use std::collections::HashMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is stable and is the
/// order used by optimizers and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TensorStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> TensorId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate tensor name `{name}`");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        TensorId(self.values.len() - 1)
    }

    pub fn get(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.lookup.get(name).map(|&i| TensorId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.values[i])
    }

    pub fn name(&self, id: TensorId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Replace every value from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &TensorStore) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))?;
            if src.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: expected {:?}, found {:?}",
                    value.shape(),
                    src.shape()
                )));
            }
            value.assign(src);
        }
        Ok(())
    }
}

pub type ParamStore = TensorStore;
pub type BufferStore = TensorStore;
pub type ParamId = TensorId;
pub type BufferId = TensorId;

/// Exact number of trainable scalars.
pub fn count_parameters(params: &ParamStore) -> usize {
    params.num_scalars()
}

pub(crate) fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_shape_simple_fn(IxDyn(shape), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub(crate) fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    Tensor::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_preserves_order_and_counts() {
        let mut s = TensorStore::new();
        let a = s.add("a", Tensor::zeros(IxDyn(&[2, 3])));
        let b = s.add("b", Tensor::zeros(IxDyn(&[4])));
        assert_eq!(s.names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.get(a).shape(), &[2, 3]);
        assert_eq!(count_parameters(&s), 10);
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut s = TensorStore::new();
        s.add("a", Tensor::zeros(IxDyn(&[2])));
        let mut other = TensorStore::new();
        other.add("a", Tensor::ones(IxDyn(&[3])));
        assert!(s.load_from(&other).is_err());
        let mut other = TensorStore::new();
        other.add("a", Tensor::ones(IxDyn(&[2])));
        s.load_from(&other).unwrap();
        assert_eq!(s.values()[0].sum(), 2.0);
    }
}
