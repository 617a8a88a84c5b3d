//! Named parameter storage with freezing, optimizer application and
//! checksums.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamW, Gradients, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ParamError {
    #[error("no parameters match {0:?}")]
    UnknownSet(String),
    #[error("parameter {0:?} already registered")]
    Duplicate(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered collection of named parameter tensors.
///
/// Insertion order is stable and defines both the optimizer slot of each
/// parameter and its position in serialized checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: Arc<HashMap<String, usize>>,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
}

impl Binding {
    /// Handle of parameter `name`; panics on an unregistered name, which is
    /// a programming error rather than a data error.
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name:?} not registered"),
        }
    }

    /// Substitutes `var` for parameter `name`, so a caller can route one
    /// parameter through a node of its own (e.g. for gradient checks).
    pub fn with_var(mut self, name: &str, var: Var) -> Self {
        let i = self.index[name];
        self.vars[i] = var;
        self
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

/// Matches `name` against a set selector: either an exact name or a
/// dot-terminated prefix such as `proj.cap.`.
fn selects(name: &str, set: &str) -> bool {
    name == set || (set.ends_with('.') && name.starts_with(set))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        Arc::make_mut(&mut self.index).insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            frozen: false,
        });
        Ok(())
    }

    /// Inserts a `rows × cols` matrix with entries drawn from `N(0, scale²)`.
    pub fn insert_normal(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), ParamError> {
        self.insert(name, normal_matrix(rows, cols, scale, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].value)
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| ParamError::UnknownSet(name.to_string()))?;
        let e = &mut self.entries[i];
        if e.value.shape() != value.shape() {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected: e.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.index.get(name).map(|&i| self.entries[i].frozen)
    }

    /// Freezes or unfreezes every parameter selected by `set` (an exact
    /// name or a `prefix.`), returning how many were affected.
    pub fn set_frozen(&mut self, set: &str, frozen: bool) -> Result<usize, ParamError> {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| selects(&e.name, set)) {
            e.frozen = frozen;
            n += 1;
        }
        if n == 0 {
            return Err(ParamError::UnknownSet(set.to_string()));
        }
        Ok(n)
    }

    /// SHA-256 over the names, shapes and little-endian values of the
    /// selected parameters; an empty selector covers the whole store.
    pub fn checksum(&self, set: &str) -> String {
        let mut h = Sha256::new();
        for e in self
            .entries
            .iter()
            .filter(|e| set.is_empty() || selects(&e.name, set))
        {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every parameter on `tape`: trainable ones as gradient
    /// leaves, frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), !e.frozen))
            .collect();
        Binding {
            vars,
            index: Arc::clone(&self.index),
        }
    }

    /// Records every parameter as a constant, for gradient-free passes.
    pub fn bind_constant(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.constant(e.value.clone()))
            .collect();
        Binding {
            vars,
            index: Arc::clone(&self.index),
        }
    }

    /// One AdamW step over all trainable parameters. Frozen parameters get
    /// neither the gradient update nor weight decay.
    pub fn apply(
        &mut self,
        opt: &mut AdamW,
        binding: &Binding,
        grads: &Gradients,
        lr: f64,
    ) -> Result<(), ParamError> {
        self.apply_selected(opt, binding, grads, lr, |_| true)
    }

    /// Like [`ParamStore::apply`], restricted to parameters for which
    /// `select` holds; the rest are left untouched.
    pub fn apply_selected(
        &mut self,
        opt: &mut AdamW,
        binding: &Binding,
        grads: &Gradients,
        lr: f64,
        select: impl Fn(&str) -> bool,
    ) -> Result<(), ParamError> {
        self.apply_with(opt, binding, grads, |name| select(name).then_some(lr))
    }

    /// One AdamW step where `lr_of` gives each parameter's learning rate,
    /// or `None` to leave it untouched.
    pub fn apply_with(
        &mut self,
        opt: &mut AdamW,
        binding: &Binding,
        grads: &Gradients,
        lr_of: impl Fn(&str) -> Option<f64>,
    ) -> Result<(), ParamError> {
        opt.begin_step();
        for (slot, e) in self.entries.iter_mut().enumerate() {
            if e.frozen {
                continue;
            }
            let Some(lr) = lr_of(&e.name) else {
                continue;
            };
            let g = grads.wrt(binding.vars[slot]);
            opt.update(slot, &mut e.value, &g, lr)?;
        }
        Ok(())
    }

    /// `self ← m·self + (1 − m)·other` over the parameters `other` shares
    /// with `self`.
    pub fn ema_from(&mut self, other: &ParamStore, m: f64) -> Result<(), ParamError> {
        for e in self.entries.iter_mut() {
            let Some(src) = other.get(&e.name) else {
                continue;
            };
            if src.shape() != e.value.shape() {
                return Err(ParamError::Shape {
                    name: e.name.clone(),
                    expected: e.value.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            for (t, &s) in e.value.data_mut().iter_mut().zip(src.data()) {
                *t = m * *t + (1.0 - m) * s;
            }
        }
        Ok(())
    }

    /// A copy holding only the selected parameters.
    pub fn subset(&self, sets: &[&str]) -> ParamStore {
        let mut out = ParamStore::new();
        for e in &self.entries {
            if sets.iter().any(|s| selects(&e.name, s)) {
                out.insert(&e.name, e.value.clone()).expect("unique names");
                out.entries.last_mut().unwrap().frozen = e.frozen;
            }
        }
        out
    }

    /// Copies values (not frozen flags) of every parameter present in
    /// `other`.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), ParamError> {
        for e in other.entries() {
            self.set(&e.name, e.value.clone())?;
        }
        Ok(())
    }

    pub fn push_entry(&mut self, entry: ParamEntry) -> Result<(), ParamError> {
        let frozen = entry.frozen;
        self.insert(&entry.name, entry.value)?;
        self.entries.last_mut().unwrap().frozen = frozen;
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

pub fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * std_normal(rng)).collect();
    Tensor::matrix(rows, cols, data)
}

pub fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}
