mod common;

use common::rng;
use prealign::autodiff::{grad_check, Tape, Tensor};
use prealign::moco::*;
use prealign::params::ParamStore;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let row = t.row_mut(r);
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn basis(i: usize, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn rows_of(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn cfg(tau: f64, lambda: f64) -> MocoConfig {
    MocoConfig {
        tau,
        lambda,
        ..Default::default()
    }
}

/// Queue filled with the given query/key rows, one enqueue of everything.
fn full_queue(u: &Tensor, v: &Tensor) -> (FeatureQueue, Vec<usize>) {
    let mut q = FeatureQueue::new(u.rows(), u.cols());
    let ids: Vec<u64> = (0..u.rows() as u64).collect();
    let slots = q.enqueue(u, v, &ids).unwrap();
    (q, slots)
}

/// Loss with the live rows equal to what is stored at `current`.
fn stored_loss(queue: &FeatureQueue, cfg: &MocoConfig, current: &[usize]) -> f64 {
    let u = queue.queries();
    let live: Vec<Vec<f64>> = current.iter().map(|&s| u.row(s).to_vec()).collect();
    let mut t = Tape::new();
    let l = t.constant(rows_of(&live));
    let loss = moco_loss(&mut t, queue, cfg, l, current).unwrap();
    t.value(loss).item()
}

/// Scalar-loop evaluation of the similarity, diagonal softmaxes and loss.
fn oracle_loss(u: &Tensor, v: &Tensor, cfg: &MocoConfig, current: &[usize]) -> f64 {
    let n = u.rows();
    let d = u.cols();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..d {
                acc += u.at(i, k) * v.at(j, k);
            }
            s[i][j] = acc / cfg.tau;
        }
    }
    let mut total = 0.0;
    for &i in current {
        let row_z: f64 = (0..n).map(|j| s[i][j].exp()).sum();
        let col_z: f64 = (0..n).map(|j| s[j][i].exp()).sum();
        let r = s[i][i].exp() / row_z;
        let c = s[i][i].exp() / col_z;
        total += cfg.lambda * r.ln() + (1.0 - cfg.lambda) * c.ln();
    }
    let denom = match cfg.normalization {
        MocoNormalization::Batch => current.len(),
        MocoNormalization::Queue => n,
    };
    -total / denom as f64
}

#[test]
fn enqueue_is_fifo() {
    let d = 4;
    let mut q = FeatureQueue::new(4, d);
    let abcd = rows_of(&(0..4).map(|i| basis(i, d)).collect::<Vec<_>>());
    q.enqueue(&abcd, &abcd, &[10, 11, 12, 13]).unwrap();
    let ef = rows_of(&[basis(0, d), basis(1, d)]);
    q.enqueue(&ef, &ef, &[14, 15]).unwrap();
    assert_eq!(q.ids(), vec![12, 13, 14, 15]);
    assert_eq!(q.len(), 4);
}

#[test]
fn warmup_counts_rows() {
    let mut q = FeatureQueue::new(8, 2);
    let b = rows_of(&[basis(0, 2), basis(1, 2), basis(0, 2)]);
    q.enqueue(&b, &b, &[1, 2, 3]).unwrap();
    assert_eq!(q.len(), 3);
    assert!(!q.is_full());
    assert!(matches!(q.similarity(1.0), Err(MocoError::NotFull { len: 3, capacity: 8 })));
}

#[test]
fn first_row_evicted_at_step_n_plus_one() {
    let n = 5;
    let mut q = FeatureQueue::new(n, 2);
    let one = rows_of(&[basis(0, 2)]);
    for step in 1..=n + 1 {
        q.enqueue(&one, &one, &[step as u64]).unwrap();
        let has_first = q.ids().contains(&1);
        assert_eq!(has_first, step <= n, "step {step}");
    }
}

#[test]
fn enqueue_rejects_bad_batches() {
    let mut q = FeatureQueue::new(2, 2);
    let three = rows_of(&[basis(0, 2), basis(1, 2), basis(0, 2)]);
    assert!(matches!(
        q.enqueue(&three, &three, &[1, 2, 3]),
        Err(MocoError::BatchTooLarge { batch: 3, capacity: 2 })
    ));
    let long = rows_of(&[vec![1.0, 1.0]]);
    let ok = rows_of(&[basis(0, 2)]);
    assert!(matches!(q.enqueue(&long, &ok, &[1]), Err(MocoError::NotNormalized { .. })));
    assert!(matches!(q.enqueue(&ok, &long, &[1]), Err(MocoError::NotNormalized { .. })));
    let wide = rows_of(&[basis(0, 3)]);
    assert!(matches!(q.enqueue(&wide, &wide, &[1]), Err(MocoError::Width { .. })));
    assert!(q.is_empty());
}

#[test]
fn similarity_examples() {
    let id = rows_of(&[basis(0, 2), basis(1, 2)]);
    let (q, _) = full_queue(&id, &id);
    assert_eq!(q.similarity(1.0).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    let mut r = rng(3);
    let u = unit_rows(&mut r, 6, 5);
    let v = unit_rows(&mut r, 6, 5);
    let (q, _) = full_queue(&u, &v);
    let s1 = q.similarity(1.0).unwrap();
    let s2 = q.similarity(2.0).unwrap();
    for (a, b) in s1.data().iter().zip(s2.data()) {
        assert!((a / 2.0 - b).abs() < 1e-15);
    }
    let tau = 0.07;
    let st = q.similarity(tau).unwrap();
    assert!(st.data().iter().all(|x| x.abs() <= 1.0 / tau + 1e-12));
}

#[test]
fn row_col_prob_examples() {
    let (r, c) = row_col_probs(&Tensor::identity(2)).unwrap();
    let e = std::f64::consts::E;
    assert!((r[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((r[0] - 0.7311).abs() < 1e-4);
    assert!((c[0] - r[0]).abs() < 1e-15);

    let mut g = rng(9);
    let a = common::rand_tensor(&mut g, &[5, 5], -3.0, 3.0);
    let sym = Tensor::new(vec![5, 5], (0..25).map(|k| a.at(k / 5, k % 5) + a.at(k % 5, k / 5)).collect()).unwrap();
    let (r, c) = row_col_probs(&sym).unwrap();
    for i in 0..5 {
        assert!((r[i] - c[i]).abs() < 1e-12);
        assert!(r[i] > 0.0 && r[i] < 1.0);
    }

    let huge = Tensor::matrix(2, 2, vec![0.0, 50.0, 50.0, 0.0]);
    let (r, c) = row_col_probs(&huge).unwrap();
    assert!(r.iter().chain(&c).all(|p| p.is_finite() && *p < 1e-20 && *p >= 0.0));

    let nan = Tensor::matrix(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]);
    assert_eq!(row_col_probs(&nan), Err(MocoError::NonFinite));
}

#[test]
fn loss_identity_example() {
    let id = rows_of(&[basis(0, 2), basis(1, 2)]);
    let (q, slots) = full_queue(&id, &id);
    let loss = stored_loss(&q, &cfg(1.0, 0.5), &slots);
    let e = std::f64::consts::E;
    assert!((loss + (e / (e + 1.0)).ln()).abs() < 1e-12);
    assert!((loss - 0.3133).abs() < 1e-4);
}

#[test]
fn lambda_symmetry_on_symmetric_similarity() {
    let mut r = rng(4);
    let u = unit_rows(&mut r, 6, 3);
    let (q, slots) = full_queue(&u, &u);
    let cur = &slots[4..];
    let a = stored_loss(&q, &cfg(0.5, 1.0), cur);
    let b = stored_loss(&q, &cfg(0.5, 0.0), cur);
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn loss_requires_full_queue() {
    let mut q = FeatureQueue::new(4, 2);
    let one = rows_of(&[basis(0, 2)]);
    let slots = q.enqueue(&one, &one, &[0]).unwrap();
    let mut t = Tape::new();
    let l = t.constant(one);
    assert!(matches!(
        moco_loss(&mut t, &q, &MocoConfig::default(), l, &slots),
        Err(MocoError::NotFull { .. })
    ));
}

#[test]
fn loss_matches_scalar_oracle() {
    let mut r = rng(11);
    for &n in &[2usize, 4, 8] {
        for &b in &[1usize, 2, 4] {
            if b > n {
                continue;
            }
            for norm in [MocoNormalization::Batch, MocoNormalization::Queue] {
                let c = MocoConfig {
                    tau: 0.2,
                    lambda: 0.3,
                    normalization: norm,
                    ..Default::default()
                };
                let mut q = FeatureQueue::new(n, 4);
                let mut slots = Vec::new();
                for step in 0..3 {
                    let bu = unit_rows(&mut r, b, 4);
                    let bv = unit_rows(&mut r, b, 4);
                    let ids: Vec<u64> = (0..b as u64).map(|i| step * 10 + i).collect();
                    for _ in 0..n.div_ceil(b) {
                        slots = q.enqueue(&bu, &bv, &ids).unwrap();
                    }
                }
                let u = q.queries();
                let v = q.keys();
                let got = stored_loss(&q, &c, &slots);
                let want = oracle_loss(&u, &v, &c, &slots);
                assert!((got - want).abs() < 1e-10, "N={n} B={b}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn literal_variant_uses_one_queue() {
    let mut r = rng(12);
    let u = unit_rows(&mut r, 4, 3);
    let v = unit_rows(&mut r, 4, 3);
    let (q, slots) = full_queue(&u, &v);
    let c = MocoConfig {
        tau: 0.5,
        variant: MocoVariant::Literal,
        ..Default::default()
    };
    let got = stored_loss(&q, &c, &slots[2..]);
    let want = oracle_loss(&u, &u, &c, &slots[2..]);
    assert!((got - want).abs() < 1e-10);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng(13);
    let u = unit_rows(&mut r, 8, 4);
    let v = unit_rows(&mut r, 8, 4);
    let (q, slots) = full_queue(&u, &v);
    let cur = slots[5..].to_vec();
    let c = cfg(0.3, 0.4);
    let point = unit_rows(&mut r, cur.len(), 4);
    let report = grad_check(
        |t, x| moco_loss(t, &q, &c, x, &cur).map_err(|e| match e {
            MocoError::Tensor(e) => e,
            other => panic!("{other}"),
        }),
        &point,
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
}

#[test]
fn gradient_confined_to_current_rows() {
    let mut r = rng(14);
    let u = unit_rows(&mut r, 6, 3);
    let v = unit_rows(&mut r, 6, 3);
    let (q, slots) = full_queue(&u, &v);
    let cur = &slots[4..];
    let mut t = Tape::new();
    let all = t.param(q.queries());
    let live = t.gather_rows(all, cur).unwrap();
    let loss = moco_loss(&mut t, &q, &cfg(0.1, 0.5), live, cur).unwrap();
    let g = t.backward(loss).unwrap().wrt(all);
    for s in 0..6 {
        let nonzero = g.row(s).iter().any(|x| *x != 0.0);
        assert_eq!(nonzero, cur.contains(&s), "slot {s}");
    }
}

fn store_with(value: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("proj.cap.w1", Tensor::filled(&[2, 3], value)).unwrap();
    s.insert("lm.head", Tensor::filled(&[2], value)).unwrap();
    s
}

#[test]
fn momentum_examples() {
    let enc = store_with(0.0);
    let mut pair = MomentumPair::new(&store_with(1.0), &["proj."], 0.9);
    pair.update(&enc).unwrap();
    assert!(pair.target.get("proj.cap.w1").unwrap().data().iter().all(|&x| (x - 0.9).abs() < 1e-15));
    assert!(pair.target.get("lm.head").is_none());

    let mut copy = MomentumPair::new(&store_with(1.0), &["proj."], 0.0);
    copy.update(&store_with(0.25)).unwrap();
    assert_eq!(copy.target.get("proj.cap.w1"), store_with(0.25).get("proj.cap.w1"));

    let mut fixed = MomentumPair::new(&store_with(1.0), &["proj."], 1.0);
    fixed.update(&store_with(-7.0)).unwrap();
    assert_eq!(fixed.target.get("proj.cap.w1"), store_with(1.0).get("proj.cap.w1"));
}

#[test]
fn momentum_rejects_shape_mismatch() {
    let mut pair = MomentumPair::new(&store_with(1.0), &["proj."], 0.5);
    let mut other = ParamStore::new();
    other.insert("proj.cap.w1", Tensor::zeros(&[3, 2])).unwrap();
    assert!(matches!(pair.update(&other), Err(MocoError::Param(_))));
    assert!(matches!(pair.update(&ParamStore::new()), Err(MocoError::Missing(_))));
}

#[test]
fn overlay_replaces_only_momentum_params() {
    let enc = store_with(2.0);
    let pair = MomentumPair::new(&store_with(5.0), &["proj."], 0.5);
    let o = pair.overlay(&enc);
    assert_eq!(o.get("proj.cap.w1"), store_with(5.0).get("proj.cap.w1"));
    assert_eq!(o.get("lm.head"), enc.get("lm.head"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fifo_keeps_pairs_aligned(cap in 1usize..12, batches in proptest::collection::vec(1usize..12, 1..40)) {
        let mut q = FeatureQueue::new(cap, 2);
        let mut next = 0u64;
        let mut expect: std::collections::VecDeque<u64> = Default::default();
        for b in batches {
            let b = b.min(cap);
            let ids: Vec<u64> = (next..next + b as u64).collect();
            next += b as u64;
            let angle = |id: u64| id as f64 * 0.37;
            let u = rows_of(&ids.iter().map(|&i| vec![angle(i).cos(), angle(i).sin()]).collect::<Vec<_>>());
            let v = rows_of(&ids.iter().map(|&i| vec![-angle(i).sin(), angle(i).cos()]).collect::<Vec<_>>());
            let slots = q.enqueue(&u, &v, &ids).unwrap();
            for (&s, &id) in slots.iter().zip(&ids) {
                prop_assert_eq!(q.slot_id(s), id);
            }
            for &id in &ids {
                expect.push_back(id);
                if expect.len() > cap { expect.pop_front(); }
            }
            prop_assert_eq!(q.ids(), expect.iter().copied().collect::<Vec<_>>());
            for s in q.order() {
                let a = angle(q.slot_id(s));
                prop_assert_eq!(q.query_row(s), &[a.cos(), a.sin()][..]);
                prop_assert_eq!(q.key_row(s), &[-a.sin(), a.cos()][..]);
            }
        }
    }

    #[test]
    fn ema_contracts_geometrically(m in 0.0f64..0.999, start in -5.0f64..5.0, target in -5.0f64..5.0, steps in 1usize..20) {
        let enc = store_with(target);
        let mut pair = MomentumPair::new(&store_with(start), &["proj."], m);
        let mut gap = (start - target).abs();
        for _ in 0..steps {
            pair.update(&enc).unwrap();
            let new_gap = (pair.target.get("proj.cap.w1").unwrap().data()[0] - target).abs();
            prop_assert!((new_gap - m * gap).abs() <= 1e-12 * (1.0 + gap));
            gap = new_gap;
        }
    }
}

#[test]
fn config_validation() {
    assert!(MocoConfig::default().validate().is_ok());
    for bad in [
        MocoConfig { tau: 0.0, ..Default::default() },
        MocoConfig { lambda: 1.5, ..Default::default() },
        MocoConfig { mu: -1.0, ..Default::default() },
        MocoConfig { momentum: 1.0, ..Default::default() },
        MocoConfig { queue_size: 0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    assert_eq!("literal".parse::<MocoVariant>(), Ok(MocoVariant::Literal));
    assert!("both".parse::<MocoVariant>().is_err());
}
