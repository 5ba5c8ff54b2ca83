use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable tensor, e.g. `refiner.layer0.w_q`.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Flat registry of every parameter in a model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of every parameter whose name starts with one of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads of the given
    /// parameters (all of them when `ids` is `None`), hex encoded.
    pub fn content_hash(&self, ids: Option<&[ParamId]>) -> String {
        let mut hasher = Sha256::new();
        let all: Vec<ParamId>;
        let ids = match ids {
            Some(ids) => ids,
            None => {
                all = (0..self.params.len()).map(ParamId).collect();
                &all
            }
        };
        for id in ids {
            let p = &self.params[id.0];
            hasher.update((p.name.len() as u64).to_le_bytes());
            hasher.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Overwrites values from `(name, tensor)` pairs. Every stored parameter
    /// must be provided with a matching shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                entries.len()
            )));
        }
        for (name, tensor) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            let slot = &mut self.params[id.0].tensor;
            if slot.shape() != tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_named",
                    lhs: slot.shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            *slot = tensor.clone();
        }
        Ok(())
    }

    /// Copies every entry whose name exists here and skips the rest.
    /// Returns how many were copied.
    pub fn load_matching(&mut self, entries: &[(String, Tensor)]) -> Result<usize> {
        let known: Vec<_> = entries
            .iter()
            .filter(|(name, _)| self.id(name).is_some())
            .cloned()
            .collect();
        let n = known.len();
        for (name, tensor) in known {
            let id = self.id(&name).expect("filtered");
            let slot = &mut self.params[id.0].tensor;
            if slot.shape() != tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_matching",
                    lhs: slot.shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            *slot = tensor;
        }
        Ok(n)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }
}
