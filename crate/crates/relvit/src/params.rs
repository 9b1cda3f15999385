//! Central registry of trainable parameters.
//!
//! Every module owns [`ParamId`] handles rather than raw matrices; the store
//! maps them to values, names (stable across runs, used by checkpoints), and
//! a learning-rate group. Binding a store onto a [`Tape`] produces one leaf
//! node per parameter so gradients accumulate in a single place even when a
//! parameter is used several times in one forward pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// Handle to one named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Vision encoder, relation head, box head.
    Body,
    /// Text query embedder.
    Text,
}

struct Entry {
    name: String,
    group: ParamGroup,
    value: Matrix,
}

/// Ordered collection of named parameters.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, group, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let cur = &self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::Contract(format!(
                "parameter {:?} has shape {:?}, refusing to load {:?}",
                self.entries[id.0].name,
                cur.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    /// Create one tape leaf per parameter, in registration order. The
    /// returned binding maps [`ParamId`]s to tape nodes for this pass.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| tape.param(i, e.value.clone()))
            .collect();
        Binding { vars }
    }
}

/// Tape nodes for every parameter of one forward pass.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Flat per-parameter gradient accumulator with a deterministic reduction
/// order (parameter order, then image order as callers invoke `accumulate`).
pub struct GradAccum {
    grads: Vec<Matrix>,
}

impl GradAccum {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let grads = store
            .entries
            .iter()
            .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
            .collect();
        GradAccum { grads }
    }

    /// Add this tape's parameter gradients into the accumulator.
    pub fn accumulate(&mut self, tape: &Tape, grads: &crate::tape::Grads) {
        for (node_idx, pid) in tape.param_leaves() {
            let src = grads.of_index(node_idx);
            let dst = &mut self.grads[pid];
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data().iter()) {
                *d += s;
            }
        }
    }

    /// Scale all gradients (e.g. by 1/batch).
    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn of(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }
}
