use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Serialized form of a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Tensor> for StoredTensor {
    fn from(t: &Tensor) -> Self {
        StoredTensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.clone(),
        }
    }
}

impl StoredTensor {
    pub fn to_tensor(&self) -> Option<Tensor> {
        (self.rows * self.cols == self.data.len()).then(|| Tensor::new(self.rows, self.cols, self.data.clone()))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        let previous = self.tensors.insert(name.to_owned(), t);
        assert!(previous.is_none(), "parameter `{name}` registered twice");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn to_stored(&self) -> BTreeMap<String, StoredTensor> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.into())).collect()
    }

    pub fn from_stored(stored: &BTreeMap<String, StoredTensor>) -> Option<Self> {
        let mut out = ParamStore::new();
        for (k, v) in stored {
            out.tensors.insert(k.clone(), v.to_tensor()?);
        }
        Some(out)
    }
}

/// Uniform in `[-bound, bound]`.
pub(crate) fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data)
}
