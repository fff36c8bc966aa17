//! Named parameter tensors grouped by sub-module path.
//!
//! A parameter's group is the first two components of its dotted name
//! (`visual.resnet.s1.b0.conv1.weight` belongs to `visual.resnet`). Freezing
//! is expressed per group, so every parameter is covered by the mask.

use std::collections::{BTreeMap, BTreeSet};

use avsr_tensor::{Scalar, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{AvsrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable; updated by the optimiser.
    Weight,
    /// Running statistics and fixed normalisers; never receive gradients.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub tensor: Tensor<S>,
    pub kind: ParamKind,
}

pub fn group_of(name: &str) -> &str {
    match name.match_indices('.').nth(1) {
        Some((i, _)) => &name[..i],
        None => name,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    entries: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(AvsrError::invalid("parameter", format!("duplicate name {name}")));
        }
        self.entries.insert(name, Param { tensor, kind });
        Ok(())
    }

    /// Replaces the value of an existing entry, keeping its kind. Shapes must match.
    pub fn set(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| AvsrError::Missing(format!("parameter {name}")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(AvsrError::invalid(
                "parameter",
                format!("{name}: shape {:?} != stored {:?}", tensor.shape(), p.tensor.shape()),
            ));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| AvsrError::Missing(format!("parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn weights(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Weight).map(|(n, p)| (n, &p.tensor))
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.entries.keys().map(|k| group_of(k).to_string()).collect()
    }

    pub fn num_weights(&self) -> usize {
        self.weights().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { tensor: p.tensor.cast(), kind: p.kind }))
                .collect(),
        }
    }

    /// Copies every entry whose group is in `groups` from `other`; returns the count.
    pub fn copy_groups_from(&mut self, other: &ParamStore<S>, groups: &[&str]) -> Result<usize> {
        let mut n = 0;
        for (name, p) in other.iter() {
            if groups.contains(&group_of(name)) {
                self.set(name, p.tensor.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// SHA-256 over names, kinds, shapes and little-endian bytes of the
    /// entries whose group passes `filter`.
    pub fn hash_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.iter().filter(|(n, _)| filter(group_of(n))) {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            h.update([p.kind as u8]);
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    pub fn hash_groups(&self, groups: &[&str]) -> String {
        self.hash_where(|g| groups.contains(&g))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    All,
    Nothing,
    Groups(BTreeSet<String>),
}

impl Trainable {
    pub fn groups<I, T>(groups: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        Trainable::Groups(groups.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, group: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Groups(g) => g.contains(group),
        }
    }
}
