//! Named `f32` tensors and the checkpoints that hold them.

use std::collections::BTreeMap;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense row-major buffer of 32-bit floats.
///
/// The shape is non-empty and every dimension is at least one, so a tensor
/// always holds at least one element. NaN values are rejected at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must have at least one dimension".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every dimension must be at least 1".into(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows".into(),
        })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel = validate_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("tensor data contains NaN"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = validate_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; numel],
        })
    }

    /// Builds a tensor from a trusted element function, used by element-wise
    /// maps whose inputs are already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }
}

/// Ordered collection of named tensors plus free-form metadata.
///
/// Iteration is always lexicographic by tensor name; every element-wise
/// operation, trimming tie-break and random draw follows this order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors<I, S>(tensors: I) -> Self
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        Self {
            tensors: tensors.into_iter().map(|(n, t)| (n.into(), t)).collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total element count across tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.set_meta(key, value);
        self
    }

    /// All tensor values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Hex SHA-256 over the tensor names and shapes, independent of values.
    pub fn schema_digest(&self) -> String {
        schema_digest(self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())))
    }

    /// Applies `f` element-wise to two congruent checkpoints, one tensor per
    /// worker. The result carries no metadata.
    pub(crate) fn zip_map<F>(&self, other: &Checkpoint, f: F) -> Result<Checkpoint>
    where
        F: Fn(f32, f32) -> f32 + Sync,
    {
        congruence_check(self, other)?;
        let names: Vec<&String> = self.tensors.keys().collect();
        let tensors: Vec<(String, Tensor)> = names
            .par_iter()
            .map(|&name| {
                let a = &self.tensors[name];
                let b = &other.tensors[name];
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                (name.clone(), Tensor::from_parts(a.shape().to_vec(), data))
            })
            .collect();
        Ok(Checkpoint::from_tensors(tensors))
    }
}

pub(crate) fn schema_digest<'a>(entries: impl Iterator<Item = (&'a str, &'a [usize])>) -> String {
    let mut hasher = Sha256::new();
    for (name, shape) in entries {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for d in shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        hasher.update([0xffu8]);
    }
    hex::encode(hasher.finalize())
}

/// Succeeds iff both checkpoints have the same tensor names with the same
/// shapes. Reports the first mismatch in canonical order.
pub fn congruence_check(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    for (name, ta) in &a.tensors {
        match b.tensors.get(name) {
            None => return Err(Error::MissingTensor(name.clone())),
            Some(tb) if tb.shape() != ta.shape() => {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    left: ta.shape().to_vec(),
                    right: tb.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(name) = b.tensors.keys().find(|n| !a.tensors.contains_key(*n)) {
        return Err(Error::MissingTensor(name.clone()));
    }
    Ok(())
}
