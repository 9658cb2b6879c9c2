//! Named parameter collections and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::graph::{Graph, Shape, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("parameter {name:?} has a non-finite entry at index {index}")]
    NonFinite { name: String, index: usize },
    #[error("checkpoint index refers to unknown parameter {0:?}")]
    UnknownName(String),
    #[error("parameter {name:?} shape mismatch: checkpoint has {found:?}, store has {want:?}")]
    ShapeMismatch { name: String, found: Shape, want: Shape },
    #[error("checkpoint payload has {found} values, index wants {want}")]
    PayloadLength { found: usize, want: usize },
    #[error("checkpoint format_version {0} unsupported")]
    FormatVersion(u32),
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("index parse: {0}")]
    Json(#[from] serde_json::Error),
}

/// One named tensor. The value is reference-counted so graphs can attach it
/// without copying; the optimizer mutates it in place via [`Param::values_mut`]
/// once no graph holds a second reference.
#[derive(Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Shape,
    pub value: Rc<Vec<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Shape, value: Vec<T>) -> Self {
        assert_eq!(value.len(), shape.len(), "param value length mismatch");
        Param { name: name.into(), shape, value: Rc::new(value) }
    }

    /// Mutable view of the values. Clones the storage first if a graph still
    /// holds a reference, so in-place updates must happen after graphs drop.
    pub fn values_mut(&mut self) -> &mut Vec<T> {
        Rc::make_mut(&mut self.value)
    }
}

/// Ordered collection of uniquely-named parameters. Cloning is cheap: the
/// value storage is shared until someone mutates it.
#[derive(Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, p: Param<T>) -> Result<(), StoreError> {
        if self.params.iter().any(|q| q.name == p.name) {
            return Err(StoreError::DuplicateName(p.name));
        }
        self.params.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalar values across all parameters.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.shape.len()).sum()
    }

    /// Errors if any parameter holds a NaN or infinity.
    pub fn assert_finite(&self) -> Result<(), StoreError> {
        for p in &self.params {
            for (i, v) in p.value.iter().enumerate() {
                if !v.is_finite() {
                    return Err(StoreError::NonFinite { name: p.name.clone(), index: i });
                }
            }
        }
        Ok(())
    }

    /// Creates one differentiable leaf per parameter (in store order),
    /// sharing storage with the store.
    pub fn attach_all(&self, graph: &Graph<T>) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| graph.leaf_shared(Rc::clone(&p.value), p.shape))
            .collect()
    }

    /// Writes values as little-endian f64 at `path` and a JSON index at
    /// `path` + ".json" mapping each name to its shape and offset (in
    /// elements) into the flat payload.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut payload: Vec<u8> = Vec::with_capacity(self.total_len() * 8);
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0usize;
        for p in &self.params {
            entries.push(IndexEntry {
                name: p.name.clone(),
                shape: p.shape,
                offset,
                len: p.shape.len(),
            });
            for v in p.value.iter() {
                payload.extend_from_slice(&v.f64().to_le_bytes());
            }
            offset += p.shape.len();
        }
        let index = CheckpointIndex { format_version: 1, params: entries };
        fs::File::create(path)?.write_all(&payload)?;
        let json = serde_json::to_string_pretty(&index)?;
        fs::write(index_path(path), json)?;
        Ok(())
    }

    /// Loads a checkpoint saved by [`ParamStore::save`] into this store.
    /// Every store parameter must be present with a matching shape, and all
    /// loaded values must be finite.
    pub fn load(&mut self, path: &Path) -> Result<(), StoreError> {
        let index: CheckpointIndex =
            serde_json::from_str(&fs::read_to_string(index_path(path))?)?;
        if index.format_version != 1 {
            return Err(StoreError::FormatVersion(index.format_version));
        }
        let mut raw = Vec::new();
        fs::File::open(path)?.read_to_end(&mut raw)?;
        if raw.len() % 8 != 0 {
            return Err(StoreError::PayloadLength {
                found: raw.len(),
                want: raw.len() / 8 * 8,
            });
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let want: usize = index.params.iter().map(|e| e.len).sum();
        if values.len() != want {
            return Err(StoreError::PayloadLength { found: values.len(), want });
        }
        let by_name: BTreeMap<&str, &IndexEntry> =
            index.params.iter().map(|e| (e.name.as_str(), e)).collect();
        for e in &index.params {
            if !self.params.iter().any(|p| p.name == e.name) {
                return Err(StoreError::UnknownName(e.name.clone()));
            }
        }
        for p in &mut self.params {
            let e = by_name
                .get(p.name.as_str())
                .ok_or_else(|| StoreError::MissingParam(p.name.clone()))?;
            if e.shape != p.shape {
                return Err(StoreError::ShapeMismatch {
                    name: p.name.clone(),
                    found: e.shape,
                    want: p.shape,
                });
            }
            let slice = &values[e.offset..e.offset + e.len];
            if let Some(i) = slice.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite { name: p.name.clone(), index: i });
            }
            *p.values_mut() = slice.iter().map(|&v| T::fl(v)).collect();
        }
        Ok(())
    }
}

fn index_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Shape,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    format_version: u32,
    params: Vec<IndexEntry>,
}
