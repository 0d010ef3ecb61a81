//! Named parameter storage and a little-endian binary serialization format.
//!
//! Parameters are registered once (insertion order is part of a model's
//! identity — checkpoints and optimizer state rely on it) and addressed by
//! [`ParamId`] afterwards. The blob format is self-describing enough to be
//! validated field by field; the decoder never trusts a length it has not
//! checked against the remaining input.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use crate::graph::{Graph, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// All trainable (and frozen) arrays of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: HashMap<String, usize>,
}

/// Errors from blob decoding and cross-store loading.
#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("weight blob truncated: needed {needed} more bytes for {context}")]
    Truncated { needed: usize, context: &'static str },
    #[error("weight blob has bad magic (expected \"SVWB\")")]
    BadMagic,
    #[error("weight blob version {0} is not supported (expected 1)")]
    BadVersion(u32),
    #[error("weight blob field out of bounds: {0}")]
    FieldOutOfBounds(String),
    #[error("weight blob contains invalid UTF-8 in a parameter name")]
    BadName,
    #[error("weight blob contains duplicate parameter \"{0}\"")]
    DuplicateName(String),
    #[error("weight blob has {extra} trailing bytes after the last parameter")]
    TrailingBytes { extra: usize },
    #[error("parameter \"{name}\" not found while loading values")]
    MissingParam { name: String },
    #[error("parameter \"{name}\" has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

const MAGIC: &[u8; 4] = b"SVWB";
const VERSION: u32 = 1;
const MAX_NAME_LEN: usize = 4096;
const MAX_NDIM: usize = 8;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique; a duplicate is a bug in
    /// model construction, not a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name \"{name}\""
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(Param { name, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Serialize every parameter (names, shapes, f64 data) little-endian.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for p in &self.entries {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in p.value.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Decode a blob produced by [`ParamStore::to_blob`]. Every length is
    /// bounds-checked against the remaining input before any allocation, so
    /// arbitrary bytes can be fed here safely.
    pub fn from_blob(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(StoreError::BadVersion(version));
        }
        let count = r.u64("parameter count")? as usize;
        // Each entry needs at least name_len + ndim fields (8 bytes).
        if count > r.remaining() / 8 {
            return Err(StoreError::FieldOutOfBounds(format!(
                "parameter count {count} cannot fit in {} remaining bytes",
                r.remaining()
            )));
        }
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            if name_len > MAX_NAME_LEN {
                return Err(StoreError::FieldOutOfBounds(format!(
                    "name length {name_len} exceeds {MAX_NAME_LEN}"
                )));
            }
            let name_bytes = r.take(name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| StoreError::BadName)?
                .to_owned();
            if store.by_name.contains_key(&name) {
                return Err(StoreError::DuplicateName(name));
            }
            let ndim = r.u32("ndim")? as usize;
            if ndim > MAX_NDIM {
                return Err(StoreError::FieldOutOfBounds(format!(
                    "ndim {ndim} exceeds {MAX_NDIM}"
                )));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut elems: usize = 1;
            for _ in 0..ndim {
                let d = r.u64("dimension")? as usize;
                elems = elems.checked_mul(d).ok_or_else(|| {
                    StoreError::FieldOutOfBounds(format!("shape {shape:?} x {d} overflows"))
                })?;
                shape.push(d);
            }
            let nbytes = elems.checked_mul(8).ok_or_else(|| {
                StoreError::FieldOutOfBounds(format!("{elems} f64 elements overflow byte count"))
            })?;
            // take() validates against the remaining input, so the data Vec
            // below never allocates more than the blob actually contains.
            let data_bytes = r.take(nbytes, "f64 data")?;
            let data: Vec<f64> = data_bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .expect("element count matches shape by construction");
            store.add(name, value);
        }
        if r.remaining() != 0 {
            return Err(StoreError::TrailingBytes {
                extra: r.remaining(),
            });
        }
        Ok(store)
    }

    /// Overwrite this store's values with those from `other`, matched by
    /// name. Every parameter of `self` must be present in `other` with the
    /// same shape; extra entries in `other` are an error surfaced as missing
    /// coverage by the caller's context.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), StoreError> {
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            let src = other.id_of(&name).ok_or(StoreError::MissingParam {
                name: name.clone(),
            })?;
            let src_value = other.value(src);
            if src_value.shape() != self.entries[i].value.shape() {
                return Err(StoreError::ShapeMismatch {
                    name,
                    expected: self.entries[i].value.shape().to_vec(),
                    found: src_value.shape().to_vec(),
                });
            }
            self.entries[i].value = src_value.clone();
        }
        Ok(())
    }
}

/// Leaf tensors for every parameter of a store, in [`ParamId`] order.
pub struct ParamTensors {
    tensors: Vec<Tensor>,
}

impl ParamTensors {
    pub fn t(&self, id: ParamId) -> Tensor {
        self.tensors[id.0]
    }
}

impl crate::graph::Gradients {
    /// Gradients in [`ParamId`] order, ready for [`crate::Adam::step`].
    pub fn per_param<'a>(&'a self, pt: &ParamTensors) -> Vec<Option<&'a ArrayD<f64>>> {
        pt.tensors.iter().map(|&t| self.wrt(t)).collect()
    }
}

impl Graph {
    /// Load every parameter into the graph as a gradient-requiring leaf.
    pub fn load_params(&mut self, store: &ParamStore) -> ParamTensors {
        let tensors = store
            .iter()
            .map(|(_, p)| self.leaf(p.value.clone()))
            .collect();
        ParamTensors { tensors }
    }

    /// Load every parameter as a constant (frozen weights: no gradients are
    /// tracked through them, which prunes the backward tape).
    pub fn load_params_frozen(&mut self, store: &ParamStore) -> ParamTensors {
        let tensors = store
            .iter()
            .map(|(_, p)| self.constant(p.value.clone()))
            .collect();
        ParamTensors { tensors }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], StoreError> {
        if self.remaining() < n {
            return Err(StoreError::Truncated {
                needed: n - self.remaining(),
                context,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, StoreError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, StoreError> {
        let b = self.take(8, context)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
