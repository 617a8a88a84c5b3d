#![allow(dead_code)]

use prealign::autodiff::{grad_check, Segment, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `sum(w ⊙ y)` for a fixed random weighting `w`, so every output element
/// carries a distinct upstream gradient.
pub fn weighted_sum(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var, TensorError> {
    let w = t.constant(w.clone().reshaped(t.value(y).shape())?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type Builder = Box<dyn Fn(&mut Tape, Var, &[Tensor]) -> Result<Var, TensorError>>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
    pub extra: Vec<(Vec<usize>, f64, f64)>,
    pub out_len: usize,
    pub build: Builder,
}

fn case(
    name: &'static str,
    shape: &[usize],
    range: (f64, f64),
    extra: Vec<(Vec<usize>, f64, f64)>,
    out_len: usize,
    build: impl Fn(&mut Tape, Var, &[Tensor]) -> Result<Var, TensorError> + 'static,
) -> PrimitiveCase {
    PrimitiveCase {
        name,
        shape: shape.to_vec(),
        lo: range.0,
        hi: range.1,
        extra,
        out_len,
        build: Box::new(build),
    }
}

/// One entry per primitive (and per differentiable argument).
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    let c = |t: &mut Tape, e: &Tensor| t.constant(e.clone());
    vec![
        case("matmul(lhs)", &[3, 4], (-1.0, 1.0), vec![(vec![4, 2], -1.0, 1.0)], 6, move |t, x, e| {
            let b = c(t, &e[0]);
            t.matmul(x, b)
        }),
        case("matmul(rhs)", &[4, 2], (-1.0, 1.0), vec![(vec![3, 4], -1.0, 1.0)], 6, move |t, x, e| {
            let a = c(t, &e[0]);
            t.matmul(a, x)
        }),
        case("matmul_nt(lhs)", &[3, 4], (-1.0, 1.0), vec![(vec![2, 4], -1.0, 1.0)], 6, move |t, x, e| {
            let b = c(t, &e[0]);
            t.matmul_nt(x, b)
        }),
        case("matmul_nt(rhs)", &[2, 4], (-1.0, 1.0), vec![(vec![3, 4], -1.0, 1.0)], 6, move |t, x, e| {
            let a = c(t, &e[0]);
            t.matmul_nt(a, x)
        }),
        case("add", &[2, 3], (-1.0, 1.0), vec![(vec![2, 3], -1.0, 1.0)], 6, move |t, x, e| {
            let b = c(t, &e[0]);
            t.add(x, b)
        }),
        case("sub(rhs)", &[2, 3], (-1.0, 1.0), vec![(vec![2, 3], -1.0, 1.0)], 6, move |t, x, e| {
            let a = c(t, &e[0]);
            t.sub(a, x)
        }),
        case("mul", &[2, 3], (-1.0, 1.0), vec![(vec![2, 3], -1.0, 1.0)], 6, move |t, x, e| {
            let b = c(t, &e[0]);
            t.mul(x, b)
        }),
        case("scale", &[2, 3], (-1.0, 1.0), vec![], 6, |t, x, _| Ok(t.scale(x, -1.7))),
        case("add_row(row)", &[3], (-1.0, 1.0), vec![(vec![4, 3], -1.0, 1.0)], 12, move |t, x, e| {
            let a = c(t, &e[0]);
            t.add_row(a, x)
        }),
        case("mul_row(lhs)", &[4, 3], (-1.0, 1.0), vec![(vec![3], -1.0, 1.0)], 12, move |t, x, e| {
            let r = c(t, &e[0]);
            t.mul_row(x, r)
        }),
        case("mul_row(row)", &[3], (-1.0, 1.0), vec![(vec![4, 3], -1.0, 1.0)], 12, move |t, x, e| {
            let a = c(t, &e[0]);
            t.mul_row(a, x)
        }),
        case("mul_col(lhs)", &[4, 3], (-1.0, 1.0), vec![(vec![4], -1.0, 1.0)], 12, move |t, x, e| {
            let r = c(t, &e[0]);
            t.mul_col(x, r)
        }),
        case("mul_col(col)", &[4], (-1.0, 1.0), vec![(vec![4, 3], -1.0, 1.0)], 12, move |t, x, e| {
            let a = c(t, &e[0]);
            t.mul_col(a, x)
        }),
        case("transpose", &[2, 3], (-1.0, 1.0), vec![], 6, |t, x, _| Ok(t.transpose(x))),
        case("reshape", &[2, 3], (-1.0, 1.0), vec![], 6, |t, x, _| t.reshape(x, &[3, 2])),
        case("row_softmax", &[3, 4], (-2.0, 2.0), vec![], 12, |t, x, _| Ok(t.row_softmax(x))),
        case("masked_row_softmax", &[2, 4], (-2.0, 2.0), vec![], 8, |t, x, _| {
            t.masked_row_softmax(x, &[true, false, true, true, false, true, true, false])
        }),
        case("log_softmax_rows", &[3, 4], (-2.0, 2.0), vec![], 12, |t, x, _| Ok(t.log_softmax_rows(x))),
        case("exp", &[2, 3], (-1.5, 1.5), vec![], 6, |t, x, _| Ok(t.exp(x))),
        case("log", &[2, 3], (0.5, 3.0), vec![], 6, |t, x, _| Ok(t.log(x))),
        case("tanh", &[2, 3], (-2.0, 2.0), vec![], 6, |t, x, _| Ok(t.tanh(x))),
        case("gelu", &[2, 3], (-3.0, 3.0), vec![], 6, |t, x, _| Ok(t.gelu(x))),
        case("sum", &[2, 3], (-1.0, 1.0), vec![], 1, |t, x, _| Ok(t.sum(x))),
        case("mean", &[2, 3], (-1.0, 1.0), vec![], 1, |t, x, _| Ok(t.mean(x))),
        case("mean_rows", &[4, 3], (-1.0, 1.0), vec![], 3, |t, x, _| Ok(t.mean_rows(x))),
        case("masked_cross_entropy", &[4, 5], (-2.0, 2.0), vec![], 1, |t, x, _| {
            t.masked_cross_entropy(x, &[0, 3, 4, 1], &[true, false, true, true])
        }),
        case("gather_rows", &[3, 2], (-1.0, 1.0), vec![], 8, |t, x, _| t.gather_rows(x, &[2, 0, 2, 1])),
        case("concat_rows", &[2, 3], (-1.0, 1.0), vec![(vec![1, 3], -1.0, 1.0)], 15, move |t, x, e| {
            let b = c(t, &e[0]);
            t.concat_rows(&[x, b, x])
        }),
        case("pick", &[3, 4], (-1.0, 1.0), vec![], 3, |t, x, _| t.pick(x, &[3, 0, 2])),
        case("rms_norm", &[3, 4], (-2.0, 2.0), vec![], 12, |t, x, _| Ok(t.rms_norm(x))),
        case("l2_normalize_rows", &[3, 4], (-2.0, 2.0), vec![], 12, |t, x, _| Ok(t.l2_normalize_rows(x))),
        case("attention(q)", &[5, 4], (-1.0, 1.0), vec![(vec![5, 4], -1.0, 1.0), (vec![5, 4], -1.0, 1.0)], 20, move |t, x, e| {
            let k = c(t, &e[0]);
            let v = c(t, &e[1]);
            t.attention(x, k, v, 2, true, &[Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }])
        }),
        case("attention(k)", &[5, 4], (-1.0, 1.0), vec![(vec![5, 4], -1.0, 1.0), (vec![5, 4], -1.0, 1.0)], 20, move |t, x, e| {
            let q = c(t, &e[0]);
            let v = c(t, &e[1]);
            t.attention(q, x, v, 2, true, &[Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }])
        }),
        case("attention(v, bidirectional)", &[5, 4], (-1.0, 1.0), vec![(vec![5, 4], -1.0, 1.0), (vec![5, 4], -1.0, 1.0)], 20, move |t, x, e| {
            let q = c(t, &e[0]);
            let k = c(t, &e[1]);
            t.attention(q, k, x, 2, false, &[Segment { start: 0, len: 5 }])
        }),
    ]
}

/// Worst relative error of one primitive over `points` random points.
pub fn check_primitive(case: &PrimitiveCase, points: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x = rand_tensor(&mut r, &case.shape, case.lo, case.hi);
        let extra: Vec<Tensor> = case
            .extra
            .iter()
            .map(|(s, lo, hi)| rand_tensor(&mut r, s, *lo, *hi))
            .collect();
        let w = rand_tensor(&mut r, &[case.out_len], 0.5, 1.5);
        let report = grad_check(
            |t, xv| {
                let y = (case.build)(t, xv, &extra)?;
                weighted_sum(t, y, &w)
            },
            &x,
            1e-4,
            None,
        )
        .unwrap_or_else(|e| panic!("{}: {e}", case.name));
        worst = worst.max(report.max_rel_error);
    }
    worst
}
