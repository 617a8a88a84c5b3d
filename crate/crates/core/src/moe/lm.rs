//! Small pre-norm causal decoder consuming visual rows followed by text.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segment, Tape, Tensor, TensorError, Var};
use crate::data::{TokenId, Vocab, EOS};
use crate::params::{Binding, ParamError, ParamStore};

/// How teacher-forced token losses are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_context: usize,
    pub loss_reduction: LossReduction,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 2,
            max_context: 128,
            loss_reduction: LossReduction::Mean,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err("lm dimensions must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return Err(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.max_context < 2 {
            return Err("max_context must be at least 2".into());
        }
        Ok(())
    }
}

/// Number of row-type embeddings: text plus one per expert.
pub const ROW_TYPES: usize = 5;

/// A batch of sequences `[visual rows; text tokens]`, one per sample.
///
/// The visual rows of all samples are stacked in `visual` in sample order;
/// `vis_types[b]` holds `1 + expert index` for each of sample `b`'s rows.
/// Logits are produced only at the text positions listed in `query_pos`.
#[derive(Clone, Debug)]
pub struct LmBatch {
    pub visual: Option<Var>,
    pub vis_types: Vec<Vec<u8>>,
    pub tokens: Vec<Vec<TokenId>>,
    pub query_pos: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLm {
    pub cfg: LmConfig,
    pub vocab: usize,
}

fn n(l: usize, part: &str) -> String {
    format!("lm.l{l}.{part}")
}

impl DecoderLm {
    pub fn new(cfg: LmConfig) -> Self {
        Self {
            cfg,
            vocab: Vocab::get().len(),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<(), ParamError> {
        let d = self.cfg.d_model;
        let f = d * self.cfg.ffn_mult;
        let sd = 1.0 / (d as f64).sqrt();
        let resid = sd / (2.0 * self.cfg.layers as f64).sqrt();
        store.insert_normal("lm.tok", self.vocab, d, 0.5, rng)?;
        store.insert_normal("lm.pos", self.cfg.max_context, d, 0.1, rng)?;
        store.insert_normal("lm.type", ROW_TYPES, d, 0.1, rng)?;
        for l in 0..self.cfg.layers {
            store.insert(&n(l, "ln1"), Tensor::ones(&[1, d]))?;
            for w in ["wq", "wk", "wv"] {
                store.insert_normal(&n(l, w), d, d, sd, rng)?;
            }
            store.insert_normal(&n(l, "wo"), d, d, resid, rng)?;
            store.insert(&n(l, "ln2"), Tensor::ones(&[1, d]))?;
            store.insert_normal(&n(l, "w1"), d, f, sd, rng)?;
            store.insert(&n(l, "b1"), Tensor::zeros(&[1, f]))?;
            store.insert_normal(&n(l, "w2"), f, d, resid * (d as f64 / f as f64).sqrt(), rng)?;
            store.insert(&n(l, "b2"), Tensor::zeros(&[1, d]))?;
        }
        store.insert("lm.lnf", Tensor::ones(&[1, d]))?;
        store.insert_normal("lm.head", d, self.vocab, sd, rng)?;
        store.insert("lm.head_b", Tensor::zeros(&[1, self.vocab]))?;
        Ok(())
    }

    fn norm(&self, t: &mut Tape, p: &Binding, x: Var, gain: &str) -> Result<Var, TensorError> {
        let h = t.rms_norm(x);
        t.mul_row(h, p.var(gain))
    }

    /// Hidden states `[rows × D]` of every position, with per-sample
    /// segments and the row offset of each sample's first text token.
    fn hidden(
        &self,
        t: &mut Tape,
        p: &Binding,
        batch: &LmBatch,
    ) -> Result<(Var, Vec<usize>), TensorError> {
        let nb = batch.tokens.len();
        if batch.vis_types.len() != nb || batch.query_pos.len() != nb {
            return Err(TensorError::Invalid("batch fields disagree on sample count".into()));
        }
        let vis_rows: usize = batch.vis_types.iter().map(Vec::len).sum();
        let have = batch.visual.map_or(0, |v| t.value(v).rows());
        if have != vis_rows {
            return Err(TensorError::Invalid(format!(
                "{have} visual rows supplied, {vis_rows} declared"
            )));
        }
        let ids: Vec<usize> = batch.tokens.iter().flatten().map(|&i| i as usize).collect();
        if ids.is_empty() {
            return Err(TensorError::Invalid("batch has no text tokens".into()));
        }
        let text = t.gather_rows(p.var("lm.tok"), &ids)?;
        let stacked = match batch.visual {
            Some(v) => t.concat_rows(&[v, text])?,
            None => text,
        };
        let mut order = Vec::with_capacity(vis_rows + ids.len());
        let mut positions = Vec::with_capacity(order.capacity());
        let mut types = Vec::with_capacity(order.capacity());
        let mut segments = Vec::with_capacity(nb);
        let mut text_start = Vec::with_capacity(nb);
        let (mut vcur, mut tcur) = (0, vis_rows);
        for b in 0..nb {
            let (nv, nt) = (batch.vis_types[b].len(), batch.tokens[b].len());
            if nv + nt > self.cfg.max_context {
                return Err(TensorError::Invalid(format!(
                    "sequence of {} rows exceeds context {}",
                    nv + nt,
                    self.cfg.max_context
                )));
            }
            if nt == 0 {
                return Err(TensorError::Invalid(format!("sample {b} has no text")));
            }
            segments.push(Segment {
                start: order.len(),
                len: nv + nt,
            });
            order.extend(vcur..vcur + nv);
            types.extend(batch.vis_types[b].iter().map(|&x| x as usize));
            text_start.push(order.len());
            order.extend(tcur..tcur + nt);
            types.extend(std::iter::repeat(0).take(nt));
            positions.extend(0..nv + nt);
            vcur += nv;
            tcur += nt;
        }
        let x = t.gather_rows(stacked, &order)?;
        let pos = t.gather_rows(p.var("lm.pos"), &positions)?;
        let x = t.add(x, pos)?;
        let ty = t.gather_rows(p.var("lm.type"), &types)?;
        let mut x = t.add(x, ty)?;
        for l in 0..self.cfg.layers {
            let h = self.norm(t, p, x, &n(l, "ln1"))?;
            let q = t.matmul(h, p.var(&n(l, "wq")))?;
            let k = t.matmul(h, p.var(&n(l, "wk")))?;
            let v = t.matmul(h, p.var(&n(l, "wv")))?;
            let a = t.attention(q, k, v, self.cfg.heads, true, &segments)?;
            let a = t.matmul(a, p.var(&n(l, "wo")))?;
            x = t.add(x, a)?;
            let h = self.norm(t, p, x, &n(l, "ln2"))?;
            let h = t.matmul(h, p.var(&n(l, "w1")))?;
            let h = t.add_row(h, p.var(&n(l, "b1")))?;
            let h = t.gelu(h);
            let h = t.matmul(h, p.var(&n(l, "w2")))?;
            let h = t.add_row(h, p.var(&n(l, "b2")))?;
            x = t.add(x, h)?;
        }
        Ok((x, text_start))
    }

    /// Logits `[Σ|query_pos| × vocab]` at the requested text positions, in
    /// sample order.
    pub fn forward(&self, t: &mut Tape, p: &Binding, batch: &LmBatch) -> Result<Var, TensorError> {
        let (x, text_start) = self.hidden(t, p, batch)?;
        let mut rows = Vec::new();
        for (b, qs) in batch.query_pos.iter().enumerate() {
            for &q in qs {
                if q >= batch.tokens[b].len() {
                    return Err(TensorError::Index {
                        op: "query position",
                        index: q,
                        len: batch.tokens[b].len(),
                    });
                }
                rows.push(text_start[b] + q);
            }
        }
        let x = t.gather_rows(x, &rows)?;
        let h = self.norm(t, p, x, "lm.lnf")?;
        let logits = t.matmul(h, p.var("lm.head"))?;
        t.add_row(logits, p.var("lm.head_b"))
    }

    /// Teacher-forced token loss over `logits` rows whose `mask` is set.
    pub fn token_loss(
        &self,
        t: &mut Tape,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let ce = t.masked_cross_entropy(logits, targets, mask)?;
        Ok(match self.cfg.loss_reduction {
            LossReduction::Mean => ce,
            LossReduction::Sum => {
                let count = mask.iter().filter(|&&m| m).count();
                t.scale(ce, count as f64)
            }
        })
    }
}

/// One teacher-forced example: the model reads `prompt` and is trained to
/// emit `target` (which should end in EOS).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextExample {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl TextExample {
    pub fn new(prompt: Vec<TokenId>, mut answer: Vec<TokenId>) -> Self {
        answer.push(EOS);
        Self {
            prompt,
            target: answer,
        }
    }

    /// Input tokens: prompt followed by all but the last target token.
    pub fn input(&self) -> Vec<TokenId> {
        let mut v = self.prompt.clone();
        v.extend_from_slice(&self.target[..self.target.len() - 1]);
        v
    }

    /// Positions (in the input) whose logits predict target tokens.
    pub fn query_positions(&self) -> Vec<usize> {
        let start = self.prompt.len() - 1;
        (start..start + self.target.len()).collect()
    }
}

/// Builds an [`LmBatch`] for teacher forcing plus its flat target list.
pub fn teacher_batch(
    visual: Option<Var>,
    vis_types: Vec<Vec<u8>>,
    examples: &[TextExample],
) -> (LmBatch, Vec<usize>) {
    let batch = LmBatch {
        visual,
        vis_types,
        tokens: examples.iter().map(TextExample::input).collect(),
        query_pos: examples.iter().map(TextExample::query_positions).collect(),
    };
    let targets = examples
        .iter()
        .flat_map(|e| e.target.iter().map(|&x| x as usize))
        .collect();
    (batch, targets)
}
