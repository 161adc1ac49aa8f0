use indexmap::IndexMap;

use super::Real;
use crate::error::{Error, Result};

/// A named trainable leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::arg(format!(
                "parameter of shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(ParamTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        ParamTensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered name → tensor map of every trainable leaf in a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, ParamTensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ParamTensor<T>) -> Result<usize> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::arg(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.tensors.insert_full(name, tensor);
        Ok(idx)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.tensors
            .get_index_of(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter {name}")))
    }

    pub fn get(&self, idx: usize) -> &ParamTensor<T> {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ParamTensor<T> {
        &mut self.tensors[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.get(name)
    }

    pub fn name(&self, idx: usize) -> &str {
        self.tensors.get_index(idx).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(ParamTensor::numel).sum()
    }

    /// Element-wise conversion into another precision, same names and order.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, p)| {
                let data = p.data.iter().map(|x| U::of(x.to_f64().unwrap_or(0.0))).collect();
                (
                    k.clone(),
                    ParamTensor {
                        shape: p.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        ParamStore { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, p)| (k.clone(), ParamTensor::zeros(p.shape.clone())))
            .collect();
        ParamStore { tensors }
    }
}
