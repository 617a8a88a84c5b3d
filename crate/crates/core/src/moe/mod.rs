//! Top-k routed, adapter-reweighted fusion of the expert token streams and
//! the decoder that consumes them.

mod lm;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::TokenId;
use crate::experts::ExpertKind;
use crate::params::{Binding, ParamError, ParamStore};

pub use lm::{teacher_batch, DecoderLm, LmBatch, LmConfig, LossReduction, TextExample, ROW_TYPES};

pub const NUM_EXPERTS: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MoeError {
    #[error("top-k {k} outside 1..={n}")]
    BadK { k: usize, n: usize },
    #[error("router logits contain a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How excluded experts are removed before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateVariant {
    /// Excluded logits are masked to −∞; the survivors renormalise.
    #[default]
    Renorm,
    /// Excluded logits are set to 0 and the softmax runs over all experts.
    Literal,
}

impl std::str::FromStr for GateVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "renorm" => Ok(Self::Renorm),
            "literal" => Ok(Self::Literal),
            _ => Err(format!("unknown gate variant {s:?} (renorm|literal)")),
        }
    }
}

/// Gate probabilities for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub probs: [f64; NUM_EXPERTS],
    pub selected: [bool; NUM_EXPERTS],
}

impl GateDecision {
    pub fn selected_indices(&self) -> Vec<usize> {
        (0..NUM_EXPERTS).filter(|&i| self.selected[i]).collect()
    }

    pub fn dense() -> Self {
        Self {
            probs: [1.0 / NUM_EXPERTS as f64; NUM_EXPERTS],
            selected: [true; NUM_EXPERTS],
        }
    }
}

/// The `k` largest logits, ties going to the lowest index.
pub fn top_k(logits: &[f64], k: usize) -> Result<Vec<bool>, MoeError> {
    let n = logits.len();
    if k == 0 || k > n {
        return Err(MoeError::BadK { k, n });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MoeError::NonFinite);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    for &i in &order[..k] {
        keep[i] = true;
    }
    Ok(keep)
}

/// Top-k gate probabilities of one logit vector, outside any tape.
pub fn route_logits(logits: &[f64; NUM_EXPERTS], k: usize, variant: GateVariant) -> Result<GateDecision, MoeError> {
    let keep = top_k(logits, k)?;
    let eff: Vec<f64> = match variant {
        GateVariant::Renorm => logits.to_vec(),
        GateVariant::Literal => (0..NUM_EXPERTS)
            .map(|i| if keep[i] { logits[i] } else { 0.0 })
            .collect(),
    };
    let live = |i: usize| variant == GateVariant::Literal || keep[i];
    let m = (0..NUM_EXPERTS)
        .filter(|&i| live(i))
        .map(|i| eff[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; NUM_EXPERTS];
    let mut z = 0.0;
    for i in (0..NUM_EXPERTS).filter(|&i| live(i)) {
        probs[i] = (eff[i] - m).exp();
        z += probs[i];
    }
    probs.iter_mut().for_each(|p| *p /= z);
    let mut selected = [false; NUM_EXPERTS];
    selected.copy_from_slice(&keep);
    Ok(GateDecision { probs, selected })
}

/// How gate probabilities are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    /// Learned router with top-k selection.
    Topk,
    /// Every expert always selected with weight `1/n`; no router.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    pub top_k: usize,
    pub gate_variant: GateVariant,
    pub router_mode: RouterMode,
    /// Adds the mean prompt-token embedding to the router input so that
    /// routing can depend on the task being asked.
    pub router_prompt: bool,
    pub adapter_hidden: usize,
    /// Learning-rate multiplier for the router parameters.
    pub router_lr_scale: f64,
    /// Fraction of training steps, at the start, during which every
    /// expert is selected regardless of `top_k`.
    pub dense_warmup: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            gate_variant: GateVariant::Renorm,
            router_mode: RouterMode::Topk,
            router_prompt: true,
            adapter_hidden: 64,
            router_lr_scale: 1.0,
            dense_warmup: 0.0,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=NUM_EXPERTS).contains(&self.top_k) {
            return Err(format!("top_k {} outside 1..={NUM_EXPERTS}", self.top_k));
        }
        if !(self.router_lr_scale > 0.0) || !self.router_lr_scale.is_finite() {
            return Err(format!("router_lr_scale {} must be positive", self.router_lr_scale));
        }
        if !(0.0..=1.0).contains(&self.dense_warmup) {
            return Err(format!("dense_warmup {} outside [0,1]", self.dense_warmup));
        }
        if self.adapter_hidden == 0 {
            return Err("adapter_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Gate output for a batch: probabilities `[B × n]` on the tape plus the
/// selected sets.
#[derive(Clone, Debug)]
pub struct GateBatch {
    pub probs: Var,
    pub selected: Vec<[bool; NUM_EXPERTS]>,
}

impl GateBatch {
    pub fn decisions(&self, t: &Tape) -> Vec<GateDecision> {
        let p = t.value(self.probs);
        self.selected
            .iter()
            .enumerate()
            .map(|(b, sel)| {
                let mut probs = [0.0; NUM_EXPERTS];
                probs.copy_from_slice(p.row(b));
                GateDecision {
                    probs,
                    selected: *sel,
                }
            })
            .collect()
    }
}

/// Router: an affine map from a `D`-wide summary to `n` expert logits.
pub struct Router;

impl Router {
    pub fn register(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Result<(), ParamError> {
        store.insert_normal("router.w", d, NUM_EXPERTS, 0.1 / (d as f64).sqrt(), rng)?;
        store.insert("router.b", Tensor::zeros(&[1, NUM_EXPERTS]))
    }

    pub fn logits(t: &mut Tape, p: &Binding, summary: Var) -> Result<Var, TensorError> {
        let l = t.matmul(summary, p.var("router.w"))?;
        t.add_row(l, p.var("router.b"))
    }

    /// Top-k gating of logits `[B × n]` on the tape.
    pub fn gate(t: &mut Tape, logits: Var, k: usize, variant: GateVariant) -> Result<GateBatch, MoeError> {
        let lv = t.value(logits).clone();
        let rows = lv.rows();
        let mut keep = Vec::with_capacity(rows * NUM_EXPERTS);
        let mut selected = Vec::with_capacity(rows);
        for b in 0..rows {
            let sel = top_k(lv.row(b), k)?;
            keep.extend_from_slice(&sel);
            let mut s = [false; NUM_EXPERTS];
            s.copy_from_slice(&sel);
            selected.push(s);
        }
        let probs = match variant {
            GateVariant::Renorm => t.masked_row_softmax(logits, &keep)?,
            GateVariant::Literal => {
                let mask = Tensor::matrix(
                    rows,
                    NUM_EXPERTS,
                    keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
                );
                let m = t.constant(mask);
                let masked = t.mul(logits, m)?;
                t.row_softmax(masked)
            }
        };
        Ok(GateBatch { probs, selected })
    }

    /// Uniform weights over all experts.
    pub fn dense(t: &mut Tape, rows: usize) -> GateBatch {
        let probs = t.constant(Tensor::filled(&[rows, NUM_EXPERTS], 1.0 / NUM_EXPERTS as f64));
        GateBatch {
            probs,
            selected: vec![[true; NUM_EXPERTS]; rows],
        }
    }
}

/// Per-expert residual adapters `F_i(x) = x + tanh(x·W1 + b1)·W2 + b2`.
/// `W2` and `b2` start at zero, so every adapter starts as the identity.
pub struct AdapterBank;

impl AdapterBank {
    pub fn prefix(kind: ExpertKind) -> String {
        format!("adapter.{}.", kind.short())
    }

    pub fn register(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<(), ParamError> {
        for k in ExpertKind::ALL {
            let pre = Self::prefix(k);
            store.insert_normal(&format!("{pre}w1"), d, hidden, 1.0 / (d as f64).sqrt(), rng)?;
            store.insert(&format!("{pre}b1"), Tensor::zeros(&[1, hidden]))?;
            store.insert(&format!("{pre}w2"), Tensor::zeros(&[hidden, d]))?;
            store.insert(&format!("{pre}b2"), Tensor::zeros(&[1, d]))?;
        }
        Ok(())
    }

    pub fn apply(t: &mut Tape, p: &Binding, kind: ExpertKind, x: Var) -> Result<Var, TensorError> {
        let pre = Self::prefix(kind);
        let h = t.matmul(x, p.var(&format!("{pre}w1")))?;
        let h = t.add_row(h, p.var(&format!("{pre}b1")))?;
        let h = t.tanh(h);
        let h = t.matmul(h, p.var(&format!("{pre}w2")))?;
        let h = t.add_row(h, p.var(&format!("{pre}b2")))?;
        t.add(x, h)
    }
}

/// Column `expert` of the gate matrix, repeated `reps` times per listed
/// sample: the per-row weights of that expert's token block.
fn gate_column(
    t: &mut Tape,
    probs: Var,
    samples: &[usize],
    reps: usize,
    expert: usize,
) -> Result<Var, TensorError> {
    let rows: Vec<usize> = samples
        .iter()
        .flat_map(|&b| std::iter::repeat(b).take(reps))
        .collect();
    let g = t.gather_rows(probs, &rows)?;
    t.pick(g, &vec![expert; rows.len()])
}

/// Gate-weighted adapter fusion of per-sample pooled expert features.
///
/// `pooled[i]` is `[B × D]` (pooled features of expert `i`), or `None` when
/// no sample selects expert `i`. Returns `f` as `[B × D]`.
pub fn fuse(
    t: &mut Tape,
    p: &Binding,
    gate: &GateBatch,
    pooled: &[Option<Var>; NUM_EXPERTS],
) -> Result<Var, TensorError> {
    let nb = gate.selected.len();
    let mut parts = Vec::new();
    let mut owner = Vec::new();
    for (i, kind) in ExpertKind::ALL.into_iter().enumerate() {
        let samples: Vec<usize> = (0..nb).filter(|&b| gate.selected[b][i]).collect();
        if samples.is_empty() {
            continue;
        }
        let src = pooled[i].ok_or_else(|| {
            TensorError::Invalid(format!("expert {kind} selected but not supplied"))
        })?;
        let x = t.gather_rows(src, &samples)?;
        let y = AdapterBank::apply(t, p, kind, x)?;
        let w = gate_column(t, gate.probs, &samples, 1, i)?;
        parts.push(t.mul_col(y, w)?);
        owner.extend(samples);
    }
    let all = t.concat_rows(&parts)?;
    let rows = all_rows_sum_matrix(&owner, nb);
    let s = t.constant(rows);
    t.matmul(s, all)
}

fn all_rows_sum_matrix(owner: &[usize], nb: usize) -> Tensor {
    let mut m = Tensor::zeros(&[nb, owner.len()]);
    let cols = owner.len();
    for (j, &b) in owner.iter().enumerate() {
        m.data_mut()[b * cols + j] = 1.0;
    }
    m
}

/// Builds the visual token sequence of every sample: each selected
/// expert's projected tokens pass through its adapter, are scaled by the
/// expert's gate probability and are concatenated in expert order.
///
/// `tokens[i]` is `[B·t_i × D]` (sample-major) or `None` when unused.
/// Returns the stacked rows and the per-sample row types for the decoder.
pub fn fused_token_stream(
    t: &mut Tape,
    p: &Binding,
    gate: &GateBatch,
    tokens: &[Option<Var>; NUM_EXPERTS],
    per_expert: &[usize; NUM_EXPERTS],
) -> Result<(Var, Vec<Vec<u8>>), TensorError> {
    let nb = gate.selected.len();
    let mut parts = Vec::new();
    let mut offsets = [0usize; NUM_EXPERTS];
    let mut local = vec![[usize::MAX; NUM_EXPERTS]; nb];
    let mut cursor = 0;
    for (i, kind) in ExpertKind::ALL.into_iter().enumerate() {
        let samples: Vec<usize> = (0..nb).filter(|&b| gate.selected[b][i]).collect();
        if samples.is_empty() {
            continue;
        }
        let src = tokens[i].ok_or_else(|| {
            TensorError::Invalid(format!("expert {kind} selected but not supplied"))
        })?;
        let n = per_expert[i];
        let idx: Vec<usize> = samples.iter().flat_map(|&b| b * n..(b + 1) * n).collect();
        let x = t.gather_rows(src, &idx)?;
        let y = AdapterBank::apply(t, p, kind, x)?;
        let w = gate_column(t, gate.probs, &samples, n, i)?;
        parts.push(t.mul_col(y, w)?);
        offsets[i] = cursor;
        for (j, &b) in samples.iter().enumerate() {
            local[b][i] = j;
        }
        cursor += idx.len();
    }
    let all = t.concat_rows(&parts)?;
    let mut order = Vec::with_capacity(cursor);
    let mut types = Vec::with_capacity(nb);
    for b in 0..nb {
        let mut ty = Vec::new();
        for i in 0..NUM_EXPERTS {
            if gate.selected[b][i] {
                let n = per_expert[i];
                let start = offsets[i] + local[b][i] * n;
                order.extend(start..start + n);
                ty.extend(std::iter::repeat(i as u8 + 1).take(n));
            }
        }
        types.push(ty);
    }
    Ok((t.gather_rows(all, &order)?, types))
}

/// `[B × B·n]` averaging matrix: row `b` averages sample `b`'s `n` rows.
pub fn block_mean_matrix(nb: usize, n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[nb, nb * n]);
    let cols = nb * n;
    for b in 0..nb {
        for j in 0..n {
            m.data_mut()[b * cols + b * n + j] = 1.0 / n as f64;
        }
    }
    m
}

/// Mean of each sample's block of `n` rows: `[B·n × D] → [B × D]`.
pub fn block_mean(t: &mut Tape, x: Var, n: usize) -> Result<Var, TensorError> {
    let rows = t.value(x).rows();
    if n == 0 || rows % n != 0 {
        return Err(TensorError::Invalid(format!("{rows} rows not divisible into blocks of {n}")));
    }
    let m = t.constant(block_mean_matrix(rows / n, n));
    t.matmul(m, x)
}

/// Generative loss plus the contrastive term weighted by `mu`.
pub fn total_loss(reg: f64, moco: f64, mu: f64) -> f64 {
    reg + mu * moco
}

/// [`total_loss`] on the tape.
pub fn total_loss_var(t: &mut Tape, reg: Var, moco: Option<Var>, mu: f64) -> Result<Var, TensorError> {
    match moco {
        Some(m) if mu != 0.0 => {
            let s = t.scale(m, mu);
            t.add(reg, s)
        }
        _ => Ok(reg),
    }
}

/// Greedy decoding of a batch of prompts given fixed visual rows.
///
/// `visual` stacks all samples' rows in sample order; decoding of a sample
/// stops at EOS (not included in the output) or after `max_len` tokens.
pub fn decode_greedy(
    lm: &DecoderLm,
    store: &ParamStore,
    visual: Option<&Tensor>,
    vis_types: &[Vec<u8>],
    prompts: &[Vec<TokenId>],
    max_len: usize,
) -> Result<Vec<Vec<TokenId>>, TensorError> {
    let nb = prompts.len();
    let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); nb];
    let mut done = vec![max_len == 0; nb];
    if prompts.iter().any(|p| p.is_empty()) {
        return Err(TensorError::Invalid("prompt must start with BOS".into()));
    }
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let v = visual.map(|v| t.constant(v.clone()));
        let tokens: Vec<Vec<TokenId>> = (0..nb)
            .map(|b| prompts[b].iter().chain(&out[b]).copied().collect())
            .collect();
        let batch = LmBatch {
            visual: v,
            vis_types: vis_types.to_vec(),
            query_pos: tokens.iter().map(|s| vec![s.len() - 1]).collect(),
            tokens,
        };
        let logits = lm.forward(&mut t, &p, &batch)?;
        let lv = t.value(logits);
        for b in 0..nb {
            if done[b] {
                continue;
            }
            let row = lv.row(b);
            let best = (0..row.len())
                .max_by(|&i, &j| row[i].total_cmp(&row[j]).then(j.cmp(&i)))
                .unwrap() as TokenId;
            if best == crate::data::EOS {
                done[b] = true;
            } else {
                out[b].push(best);
                if out[b].len() >= max_len {
                    done[b] = true;
                }
            }
        }
    }
    Ok(out)
}
