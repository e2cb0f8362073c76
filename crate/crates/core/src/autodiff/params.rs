use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::tensor::{Scalar, Tensor};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<F> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.ndim() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl<F> FromIterator<(String, Tensor<F>)> for ParamSet<F> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<F>)>>(iter: I) -> Self {
        Self {
            params: iter.into_iter().collect(),
        }
    }
}

impl<F> IntoIterator for ParamSet<F> {
    type Item = (String, Tensor<F>);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor<F>>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.into_iter()
    }
}
