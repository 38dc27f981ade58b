use std::collections::BTreeMap;

use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Names beginning with this prefix belong to an adapter and are excluded from
/// backbone digests.
pub const ADAPTER_PREFIX: &str = "adapter/";

/// Named parameter arrays in a stable (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Tensor>,
}

/// Hex-encoded SHA-256 over names, shapes and the exact bit patterns of values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamDigest(pub String);

impl std::fmt::Display for ParamDigest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.arrays.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            if self.contains(name) {
                return Err(Error::Contract(format!("duplicate parameter `{name}`")));
            }
            self.insert(name, t.clone());
        }
        Ok(())
    }

    /// Subset of arrays whose names satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn digest(&self) -> ParamDigest {
        self.digest_where(|_| true)
    }

    pub fn backbone_digest(&self) -> ParamDigest {
        self.digest_where(|name| !name.starts_with(ADAPTER_PREFIX))
    }

    fn digest_where(&self, keep: impl Fn(&str) -> bool) -> ParamDigest {
        let mut h = Sha256::new();
        for (name, t) in self.arrays.iter().filter(|(k, _)| keep(k)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        ParamDigest(hex::encode(h.finalize()))
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(Tensor::is_finite)
    }

    /// Registers every array as a graph leaf: named params when `trainable`,
    /// anonymous constants otherwise.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Binding {
        let ids = self
            .arrays
            .iter()
            .map(|(name, t)| {
                let id = if trainable {
                    graph.param(name.clone(), t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        Binding { ids }
    }
}

/// Anything an optimizer can write parameter values through.
pub trait Trainable {
    fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor>;
}

impl Trainable for ParamStore {
    fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

/// Map from parameter name to its node in one graph.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}
