//! Momentum contrast: aligned query/key FIFO queues, the row/column
//! symmetric contrastive loss and the EMA momentum encoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::params::{ParamError, ParamStore};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MocoError {
    #[error("batch of {batch} exceeds queue capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },
    #[error("row {row} has norm {norm}, expected 1")]
    NotNormalized { row: usize, norm: f64 },
    #[error("queue holds {len} of {capacity} rows")]
    NotFull { len: usize, capacity: usize },
    #[error("row width {found} does not match queue width {expected}")]
    Width { expected: usize, found: usize },
    #[error("similarity matrix contains a non-finite value")]
    NonFinite,
    #[error("momentum encoder lacks parameter {0:?}")]
    Missing(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MocoVariant {
    /// Query rows against momentum-encoded key rows.
    #[default]
    Paired,
    /// A single queue contrasted with itself.
    Literal,
}

impl std::str::FromStr for MocoVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paired" => Ok(Self::Paired),
            "literal" => Ok(Self::Literal),
            _ => Err(format!("unknown moco variant {s:?} (paired|literal)")),
        }
    }
}

/// Denominator of the summed per-sample terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MocoNormalization {
    #[default]
    Batch,
    Queue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MocoConfig {
    pub queue_size: usize,
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
    pub momentum: f64,
    pub variant: MocoVariant,
    pub normalization: MocoNormalization,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            queue_size: 256,
            tau: 0.07,
            lambda: 0.5,
            mu: 0.1,
            momentum: 0.99,
            variant: MocoVariant::Paired,
            normalization: MocoNormalization::Batch,
        }
    }
}

impl MocoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.queue_size == 0 {
            return Err("queue_size must be positive".into());
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(format!("tau {} must be positive", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda {} outside [0,1]", self.lambda));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(format!("mu {} must be nonnegative", self.mu));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum {} outside [0,1)", self.momentum));
        }
        Ok(())
    }
}

const NORM_TOL: f64 = 1e-9;

/// Two aligned ring buffers of unit rows. Slot `i` of the query view and
/// slot `i` of the key view always hold the same sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    ids: Vec<u64>,
    cursor: usize,
    len: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            u: vec![0.0; capacity * dim],
            v: vec![0.0; capacity * dim],
            ids: vec![0; capacity],
            cursor: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    fn check(&self, t: &Tensor) -> Result<(), MocoError> {
        if t.cols() != self.dim {
            return Err(MocoError::Width {
                expected: self.dim,
                found: t.cols(),
            });
        }
        for r in 0..t.rows() {
            let norm = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(MocoError::NotNormalized { row: r, norm });
            }
        }
        Ok(())
    }

    /// Appends aligned pairs, evicting the oldest when full. Returns the
    /// slots written, in batch order.
    pub fn enqueue(&mut self, q: &Tensor, k: &Tensor, ids: &[u64]) -> Result<Vec<usize>, MocoError> {
        let b = q.rows();
        if b > self.capacity {
            return Err(MocoError::BatchTooLarge {
                batch: b,
                capacity: self.capacity,
            });
        }
        if k.rows() != b || ids.len() != b {
            return Err(MocoError::Tensor(TensorError::ShapeMismatch {
                op: "enqueue",
                lhs: q.shape().to_vec(),
                rhs: k.shape().to_vec(),
            }));
        }
        self.check(q)?;
        self.check(k)?;
        let d = self.dim;
        let mut slots = Vec::with_capacity(b);
        for r in 0..b {
            let s = self.cursor;
            self.u[s * d..(s + 1) * d].copy_from_slice(q.row(r));
            self.v[s * d..(s + 1) * d].copy_from_slice(k.row(r));
            self.ids[s] = ids[r];
            slots.push(s);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(slots)
    }

    /// Slots from oldest to newest.
    pub fn order(&self) -> Vec<usize> {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        (0..self.len).map(|i| (start + i) % self.capacity).collect()
    }

    /// Sample ids from oldest to newest.
    pub fn ids(&self) -> Vec<u64> {
        self.order().into_iter().map(|s| self.ids[s]).collect()
    }

    pub fn slot_id(&self, slot: usize) -> u64 {
        self.ids[slot]
    }

    pub fn query_row(&self, slot: usize) -> &[f64] {
        &self.u[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn key_row(&self, slot: usize) -> &[f64] {
        &self.v[slot * self.dim..(slot + 1) * self.dim]
    }

    fn require_full(&self) -> Result<(), MocoError> {
        if !self.is_full() {
            return Err(MocoError::NotFull {
                len: self.len,
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    /// Query view `U` (`N × D`, by slot).
    pub fn queries(&self) -> Tensor {
        Tensor::matrix(self.capacity, self.dim, self.u.clone())
    }

    /// Key view `V` (`N × D`, by slot).
    pub fn keys(&self) -> Tensor {
        Tensor::matrix(self.capacity, self.dim, self.v.clone())
    }

    /// `S = U·Vᵀ / τ` over a full queue.
    pub fn similarity(&self, tau: f64) -> Result<Tensor, MocoError> {
        self.require_full()?;
        let mut s = self.queries().matmul(&self.keys().transpose())?;
        s.data_mut().iter_mut().for_each(|x| *x /= tau);
        Ok(s)
    }
}

/// Diagonal row- and column-softmax probabilities of a square matrix.
pub fn row_col_probs(s: &Tensor) -> Result<(Vec<f64>, Vec<f64>), MocoError> {
    let n = s.rows();
    if s.cols() != n {
        return Err(MocoError::Tensor(TensorError::ShapeMismatch {
            op: "row_col_probs",
            lhs: s.shape().to_vec(),
            rhs: vec![n, n],
        }));
    }
    if !s.is_finite() {
        return Err(MocoError::NonFinite);
    }
    let diag_softmax = |get: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let m = (0..n).map(|j| get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|j| (get(i, j) - m).exp()).sum();
                (get(i, i) - m).exp() / z
            })
            .collect()
    };
    let r = diag_softmax(&|i, j| s.at(i, j));
    let c = diag_softmax(&|i, j| s.at(j, i));
    Ok((r, c))
}

/// The contrastive loss over a full queue whose `current` slots are
/// replaced by the live rows `live` (`B × D`, unit norm). Only `live`
/// carries gradient; every other queue row is a constant.
pub fn moco_loss(
    t: &mut Tape,
    queue: &FeatureQueue,
    cfg: &MocoConfig,
    live: Var,
    current: &[usize],
) -> Result<Var, MocoError> {
    queue.require_full()?;
    let b = current.len();
    let lv = t.value(live);
    if lv.rows() != b || lv.cols() != queue.dim {
        return Err(MocoError::Width {
            expected: queue.dim,
            found: lv.cols(),
        });
    }
    let n = queue.capacity;
    let mut idx: Vec<usize> = (0..n).collect();
    for (j, &s) in current.iter().enumerate() {
        idx[s] = n + j;
    }
    let stored = t.constant(queue.queries());
    let both = t.concat_rows(&[stored, live])?;
    let u = t.gather_rows(both, &idx)?;
    let v = match cfg.variant {
        MocoVariant::Paired => t.constant(queue.keys()),
        MocoVariant::Literal => u,
    };
    let s = t.matmul_nt(u, v)?;
    let s = t.scale(s, 1.0 / cfg.tau);
    let rows = t.log_softmax_rows(s);
    let st = t.transpose(s);
    let cols = t.log_softmax_rows(st);
    let lr = t.gather_rows(rows, current)?;
    let lr = t.pick(lr, current)?;
    let lc = t.gather_rows(cols, current)?;
    let lc = t.pick(lc, current)?;
    let lr = t.scale(lr, cfg.lambda);
    let lc = t.scale(lc, 1.0 - cfg.lambda);
    let both = t.add(lr, lc)?;
    let total = t.sum(both);
    let denom = match cfg.normalization {
        MocoNormalization::Batch => b,
        MocoNormalization::Queue => n,
    };
    Ok(t.scale(total, -1.0 / denom as f64))
}

/// Encoder parameters `θ_E` paired with an EMA copy `θ_M`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumPair {
    pub momentum: f64,
    pub target: ParamStore,
}

impl MomentumPair {
    /// Starts `θ_M` as a copy of the selected encoder parameters.
    pub fn new(encoder: &ParamStore, sets: &[&str], momentum: f64) -> Self {
        Self {
            momentum,
            target: encoder.subset(sets),
        }
    }

    /// `θ_M ← m·θ_M + (1 − m)·θ_E`.
    pub fn update(&mut self, encoder: &ParamStore) -> Result<(), MocoError> {
        for e in self.target.entries() {
            let src = encoder
                .get(&e.name)
                .ok_or_else(|| MocoError::Missing(e.name.clone()))?;
            if src.shape() != e.value.shape() {
                return Err(MocoError::Param(ParamError::Shape {
                    name: e.name.clone(),
                    expected: e.value.shape().to_vec(),
                    found: src.shape().to_vec(),
                }));
            }
        }
        self.target.ema_from(encoder, self.momentum)?;
        Ok(())
    }

    /// Momentum parameters layered over the rest of `encoder`, for running
    /// the key path with the same code as the query path.
    pub fn overlay(&self, encoder: &ParamStore) -> ParamStore {
        let mut s = encoder.clone();
        s.load_values(&self.target).expect("momentum params mirror encoder");
        s
    }
}
