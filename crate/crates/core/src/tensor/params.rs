use std::hash::Hasher;
use std::ops::Index;

use fnv::FnvHasher;

use super::{Tape, Tensor, Var};
use crate::error::{CktError, Result};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h = FnvHasher::default();
    for b in bytes {
        h.write_u8(b);
    }
    h.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of weight tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in &mut self.tensors {
            t.requires_grad = on;
        }
    }

    /// Replace the values of `id`, keeping its shape.
    pub fn assign(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != values.len() {
            return Err(CktError::shape("assign", t.shape(), &[values.len()]));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Hash of names, shapes and value bytes.
    pub fn content_hash(&self) -> u64 {
        let bytes = self.iter().flat_map(|(n, t)| {
            n.bytes()
                .chain(t.shape().iter().flat_map(|d| (*d as u64).to_le_bytes()))
                .chain(t.data().iter().flat_map(|v| v.to_le_bytes()))
        });
        fnv1a64(bytes)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }
}

/// Per-tape handles for every entry of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
