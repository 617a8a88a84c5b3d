use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::params::{Binding, ParamError, ParamStore};

/// Single-head attention from a cache-derived query onto the current
/// expert's tokens. `F_q`, `F_k`, `F_v` are `D → D` affine maps stored under
/// `resid.<stage>.`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualAttention {
    pub prefix: String,
    pub dim: usize,
}

impl ResidualAttention {
    pub fn new(stage_label: &str, dim: usize) -> Self {
        Self {
            prefix: format!("resid.{stage_label}."),
            dim,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}{part}", self.prefix)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<(), ParamError> {
        let d = self.dim;
        for m in ["q", "k", "v"] {
            store.insert_normal(&self.name(&format!("w{m}")), d, d, 1.0 / (d as f64).sqrt(), rng)?;
            store.insert(&self.name(&format!("b{m}")), Tensor::zeros(&[1, d]))?;
        }
        Ok(())
    }

    fn affine(&self, t: &mut Tape, p: &Binding, x: Var, m: &str) -> Result<Var, TensorError> {
        let y = t.matmul(x, p.var(&self.name(&format!("w{m}"))))?;
        t.add_row(y, p.var(&self.name(&format!("b{m}"))))
    }

    /// Attention weights `[B × T]` and output `[B × D]` for `B` images.
    ///
    /// `query_input` is `[B × D]`, one row per image; `feats` stacks each
    /// image's `tokens` feature rows (`[B·T × D]`).
    pub fn attend(
        &self,
        t: &mut Tape,
        p: &Binding,
        query_input: Var,
        feats: Var,
        tokens: usize,
    ) -> Result<(Var, Var), TensorError> {
        let (qv, fv) = (t.value(query_input), t.value(feats));
        let nb = qv.rows();
        if qv.cols() != self.dim || fv.cols() != self.dim || fv.rows() != nb * tokens {
            return Err(TensorError::ShapeMismatch {
                op: "residual_attend",
                lhs: qv.shape().to_vec(),
                rhs: fv.shape().to_vec(),
            });
        }
        let q = self.affine(t, p, query_input, "q")?;
        let k = self.affine(t, p, feats, "k")?;
        let v = self.affine(t, p, feats, "v")?;
        let rep: Vec<usize> = (0..nb).flat_map(|b| std::iter::repeat(b).take(tokens)).collect();
        let qr = t.gather_rows(q, &rep)?;
        let prod = t.mul(qr, k)?;
        let ones = t.constant(Tensor::ones(&[self.dim, 1]));
        let scores = t.matmul(prod, ones)?;
        let scores = t.reshape(scores, &[nb, tokens])?;
        let scores = t.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let w = t.row_softmax(scores);
        let wf = t.reshape(w, &[nb * tokens])?;
        let weighted = t.mul_col(v, wf)?;
        let sum = t.constant(block_sum_matrix(nb, tokens));
        let out = t.matmul(sum, weighted)?;
        Ok((w, out))
    }
}

fn block_sum_matrix(nb: usize, n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[nb, nb * n]);
    for b in 0..nb {
        for j in 0..n {
            m.data_mut()[b * nb * n + b * n + j] = 1.0;
        }
    }
    m
}
