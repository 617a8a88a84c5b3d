mod common;

use common::{rand_tensor, rng};
use prealign::alignment::*;
use prealign::autodiff::{grad_check, Tape, Tensor};
use prealign::data::{Dataset, DatasetConfig, Vocab, BOS, SEP};
use prealign::experts::{ExpertKind, FeatureBank};
use prealign::moe::{DecoderLm, LmConfig};
use prealign::optim_config::OptimConfig;
use prealign::params::ParamStore;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn cache_write_read_and_bitmap() {
    let mut c = FeatureCache::new(2, 3, 4);
    assert!(matches!(c.read(0, 1), Err(AlignError::Unpopulated { expert: 0, image: 1 })));
    assert!(matches!(c.write(0, 0, &[0.0; 4]), Err(AlignError::CacheInactive { expert: 0 })));
    c.activate(0).unwrap();
    c.write(0, 1, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(c.read(0, 1).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(!c.row_full(0));
    assert!(matches!(c.write(0, 2, &[0.0; 3]), Err(AlignError::Width { expected: 4, found: 3 })));
    assert!(matches!(c.write(0, 9, &[0.0; 4]), Err(AlignError::CacheIndex { .. })));
    for j in 0..3 {
        c.write(0, j, &[j as f64; 4]).unwrap();
    }
    assert!(c.row_full(0));
    assert!(!c.row_full(1));
    c.seal(0);
    assert!(matches!(c.write(0, 0, &[9.0; 4]), Err(AlignError::CacheSealed { expert: 0 })));
    assert!(c.activate(0).is_err());
    assert_eq!(c.read(0, 2).unwrap(), &[2.0; 4]);
}

fn cache_with(rows: &[(usize, Vec<f64>)], images: usize, dim: usize) -> FeatureCache {
    let mut c = FeatureCache::new(4, images, dim);
    for (e, v) in rows {
        c.activate(*e).unwrap();
        for j in 0..images {
            c.write(*e, j, v).unwrap();
        }
        c.seal(*e);
    }
    c
}

#[test]
fn gated_query_examples() {
    let c = cache_with(&[(0, vec![2.0, 0.0, 0.0]), (1, vec![5.0, -3.0, 7.0])], 2, 3);
    assert_eq!(gated_query(&c, &[0, 1], 0, &[false, false], 0.5).unwrap(), vec![0.0; 3]);
    assert_eq!(gated_query(&c, &[0, 1], 0, &[true, false], 0.5).unwrap(), vec![1.0, 0.0, 0.0]);
    assert_eq!(gated_query(&c, &[0, 1], 1, &[true, true], 0.0).unwrap(), vec![0.0; 3]);
    assert_eq!(gated_query(&c, &[], 1, &[], 0.3).unwrap(), vec![0.0; 3]);
    assert_eq!(expected_query(&c, &[0], 1, 0.5, 0.5).unwrap(), vec![0.5, 0.0, 0.0]);
    assert!(gated_query(&c, &[2], 0, &[true], 1.0).is_err());
    assert_eq!(gated_query(&c, &[2], 0, &[false], 1.0).unwrap(), vec![0.0; 3]);
}

fn resid_store(d: usize, seed: u64) -> (ResidualAttention, ParamStore) {
    let att = ResidualAttention::new("cls", d);
    let mut s = ParamStore::new();
    att.register(&mut s, &mut rng(seed)).unwrap();
    let mut r = rng(seed + 1);
    for m in ["bq", "bk", "bv"] {
        s.set(&format!("resid.cls.{m}"), rand_tensor(&mut r, &[1, d], -0.5, 0.5)).unwrap();
    }
    (att, s)
}

#[test]
fn single_token_passes_value_through() {
    let d = 5;
    let (att, s) = resid_store(d, 1);
    let mut r = rng(2);
    let mut t = Tape::new();
    let p = s.bind(&mut t);
    let q = t.constant(rand_tensor(&mut r, &[3, d], -1.0, 1.0));
    let f = rand_tensor(&mut r, &[3, d], -1.0, 1.0);
    let fv = t.constant(f.clone());
    let (w, out) = att.attend(&mut t, &p, q, fv, 1).unwrap();
    assert!(t.value(w).data().iter().all(|&x| x == 1.0));
    let want = f
        .matmul(s.get("resid.cls.wv").unwrap())
        .unwrap();
    let bv = s.get("resid.cls.bv").unwrap();
    for b in 0..3 {
        for j in 0..d {
            assert!((t.value(out).at(b, j) - (want.at(b, j) + bv.data()[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn attend_rejects_width_mismatch() {
    let (att, s) = resid_store(4, 3);
    let mut t = Tape::new();
    let p = s.bind(&mut t);
    let q = t.constant(Tensor::zeros(&[1, 3]));
    let f = t.constant(Tensor::zeros(&[2, 4]));
    assert!(att.attend(&mut t, &p, q, f, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, nb in 1usize..4, tokens in 1usize..9) {
        let d = 6;
        let (att, s) = resid_store(d, seed);
        let mut r = rng(seed);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let q = t.constant(rand_tensor(&mut r, &[nb, d], -3.0, 3.0));
        let f = t.constant(rand_tensor(&mut r, &[nb * tokens, d], -3.0, 3.0));
        let (w, out) = att.attend(&mut t, &p, q, f, tokens).unwrap();
        for b in 0..nb {
            prop_assert!((t.value(w).row(b).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert_eq!(t.value(out).shape(), &[nb, d][..]);
    }
}

#[test]
fn residual_gradients_match_finite_differences() {
    let d = 4;
    let tokens = 3;
    let (att, s) = resid_store(d, 5);
    let mut r = rng(6);
    let qin = rand_tensor(&mut r, &[2, d], -1.0, 1.0);
    let feats = rand_tensor(&mut r, &[2 * tokens, d], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[2, d], -1.0, 1.0);
    for name in ["wq", "bq", "wk", "bk", "wv", "bv"] {
        let full = format!("resid.cls.{name}");
        let point = s.get(&full).unwrap().clone();
        let rep = grad_check(
            |t, x| {
                let p = s.bind(t).with_var(&full, x);
                let q = t.constant(qin.clone());
                let f = t.constant(feats.clone());
                let (_, out) = att.attend(t, &p, q, f, tokens)?;
                common::weighted_sum(t, out, &w)
            },
            &point,
            1e-6,
            None,
        )
        .unwrap();
        if name == "bk" {
            // Softmax is shift-invariant, so the key bias gets no gradient.
            assert!(rep.analytic.iter().chain(&rep.numeric).all(|g| g.abs() < 1e-8));
        } else {
            assert!(rep.max_rel_error < 1e-4, "{name}: {}", rep.max_rel_error);
        }
    }
}

#[test]
fn plan_parsing() {
    let p = StagePlan::default();
    assert_eq!(p.describe(), "cap>cls>det>seg");
    assert_eq!(p.budgets, vec![2000, 500, 200, 200]);
    let rev = StagePlan::parse("seg,det,cls,cap", &[2000, 500, 200, 200]).unwrap();
    assert_eq!(rev.stages[0], vec![ExpertKind::Segmentation]);
    assert_eq!(rev.budgets, vec![2000, 500, 200, 200]);
    let all = StagePlan::parse("cap,all", &[2000, 500, 200, 200]).unwrap();
    assert_eq!(all.len(), 2);
    assert_eq!(all.budgets, vec![2000, 900]);
    assert_eq!(all.label(1), "cls+det+seg");
    for bad in ["cap,cls,det", "cap,cap,det,seg", "cap,all,seg", "cap,cls,det,xyz"] {
        assert!(StagePlan::parse(bad, &[1, 1, 1, 1]).is_err(), "{bad}");
    }
    assert!(StagePlan::parse("cap,cls,det,seg", &[1, 1, 1]).is_err());
    assert!(StagePlan::parse("cap,cls,det,seg", &[1, 0, 1, 1]).is_err());
}

#[test]
fn instructions_accumulate() {
    let v = Vocab::get();
    let p = StagePlan::default();
    assert_eq!(build_instruction(&p, 0), vec![BOS, v.word("caption")]);
    assert_eq!(build_instruction(&p, 1), vec![BOS, v.word("caption"), SEP, v.word("recognization")]);
    let four = build_instruction(&p, 3);
    assert_eq!(
        four,
        vec![
            BOS,
            v.word("caption"),
            SEP,
            v.word("recognization"),
            SEP,
            v.word("detection"),
            SEP,
            v.word("segmentation")
        ]
    );
    for k in 1..4 {
        let prev = build_instruction(&p, k - 1);
        let cur = build_instruction(&p, k);
        assert_eq!(&cur[..prev.len()], &prev[..]);
    }
}

#[test]
fn gate_sampling_rate() {
    let mut r = rng(7);
    for prob in [0.1, 0.5, 0.9] {
        let g = sample_gates(&mut r, 10_000, prob);
        let mean = g.iter().filter(|&&x| x).count() as f64 / 1e4;
        assert!((mean - prob).abs() <= 0.02, "{prob}: {mean}");
    }
    assert!(sample_gates(&mut r, 100, 0.0).iter().all(|&x| !x));
}

struct Tiny {
    data: Dataset,
    bank: FeatureBank,
    lm: DecoderLm,
    optim: OptimConfig,
}

fn tiny() -> Tiny {
    let data = Dataset::generate(
        3,
        &DatasetConfig {
            train_size: 48,
            eval_size: 16,
            ..Default::default()
        },
    )
    .unwrap();
    let bank = FeatureBank::new(&data);
    let lm = DecoderLm::new(LmConfig {
        d_model: 16,
        heads: 2,
        ..Default::default()
    });
    Tiny {
        data,
        bank,
        lm,
        optim: OptimConfig::default(),
    }
}

fn tiny_cfg(gate_probability: f64, lm_trainable: bool) -> AlignConfig {
    AlignConfig {
        stage_budgets: vec![12, 6, 6, 6],
        gate_probability,
        gamma: 1.0,
        lm_trainable,
        batch_size: 4,
        eval_every: 6,
        eval_images: 8,
        ..Default::default()
    }
}

#[test]
fn closed_gates_ignore_cache_contents() {
    let w = tiny();
    let cfg = tiny_cfg(0.0, true);
    let ctx = AlignContext {
        cfg: &cfg,
        optim: &w.optim,
        lm: &w.lm,
        data: &w.data,
        bank: &w.bank,
        seed: 1,
        run_id: "t",
    };
    let mut st = AlignState::new(StagePlan::parse(&cfg.order, &cfg.stage_budgets).unwrap(), &w.lm, w.bank.len(), 1).unwrap();
    st.run_stage(&ctx, 0).unwrap();
    st.run_stage(&ctx, 1).unwrap();
    let mut scrambled = st.clone();
    let mut r = rng(8);
    scrambled.cache.scramble(|_, _, _| r.gen_range(-100.0..100.0));
    let images: Vec<usize> = (0..6).collect();
    let visual = |s: &AlignState| {
        let mut t = Tape::new();
        let p = s.store.bind(&mut t);
        let (v, _) = s
            .stage_visual(&mut t, &p, &ctx, 2, &images, GateMode::Sample(0.0), &mut rng(9))
            .unwrap();
        t.value(v).clone()
    };
    assert_eq!(visual(&st).data(), visual(&scrambled).data());
    assert_eq!(st.evaluate(&ctx, 2, &images).unwrap(), scrambled.evaluate(&ctx, 2, &images).unwrap());
}

#[test]
fn open_gates_read_the_cache() {
    let w = tiny();
    let cfg = tiny_cfg(1.0, true);
    let ctx = AlignContext {
        cfg: &cfg,
        optim: &w.optim,
        lm: &w.lm,
        data: &w.data,
        bank: &w.bank,
        seed: 1,
        run_id: "t",
    };
    let mut st = AlignState::new(StagePlan::parse(&cfg.order, &cfg.stage_budgets).unwrap(), &w.lm, w.bank.len(), 1).unwrap();
    st.run_stage(&ctx, 0).unwrap();
    let mut scrambled = st.clone();
    let mut r = rng(10);
    scrambled.cache.scramble(|_, _, _| r.gen_range(-1.0..1.0));
    let images: Vec<usize> = (0..4).collect();
    let visual = |s: &AlignState| {
        let mut t = Tape::new();
        let p = s.store.bind(&mut t);
        let (v, _) = s
            .stage_visual(&mut t, &p, &ctx, 1, &images, GateMode::Sample(1.0), &mut rng(11))
            .unwrap();
        t.value(v).clone()
    };
    assert_ne!(visual(&st).data(), visual(&scrambled).data());
}

#[test]
fn stages_run_in_order_and_freeze() {
    let w = tiny();
    let cfg = tiny_cfg(0.5, true);
    let ctx = AlignContext {
        cfg: &cfg,
        optim: &w.optim,
        lm: &w.lm,
        data: &w.data,
        bank: &w.bank,
        seed: 2,
        run_id: "t",
    };
    let mut st = AlignState::new(StagePlan::parse(&cfg.order, &cfg.stage_budgets).unwrap(), &w.lm, w.bank.len(), 2).unwrap();
    assert!(matches!(st.run_stage(&ctx, 1), Err(AlignError::OutOfOrder { requested: 1, completed: 0 })));
    let mut sums: Vec<Vec<String>> = Vec::new();
    for stage in 0..4 {
        let report = st.run_stage(&ctx, stage).unwrap();
        assert_eq!(report.records.len(), cfg.stage_budgets[stage]);
        assert!(report.records.iter().all(|r| r.get("loss").is_some_and(f64::is_finite)));
        assert!(report.final_eval_loss.is_finite());
        sums.push(st.stage_sets(stage).iter().map(|s| st.store.checksum(s)).collect());
        for (done, want) in sums.iter().enumerate() {
            let now: Vec<String> = st.stage_sets(done).iter().map(|s| st.store.checksum(s)).collect();
            assert_eq!(&now, want, "stage {done} parameters changed after stage {stage}");
            for set in st.stage_sets(done) {
                let frozen = st.store.entries().iter().filter(|e| e.name.starts_with(&set)).all(|e| e.frozen);
                assert!(frozen, "{set} not frozen");
            }
        }
        for k in ExpertKind::ALL {
            assert_eq!(st.cache.row_full(k.index()), st.plan.stage_of(k) <= stage);
        }
    }
    assert!(st.cache.bitmap().iter().all(|&b| b));
    assert!(st.run_stage(&ctx, 4).is_err());
}

#[test]
fn isolation_control_keeps_stage_one_loss() {
    let w = tiny();
    let cfg = tiny_cfg(0.0, false);
    let ctx = AlignContext {
        cfg: &cfg,
        optim: &w.optim,
        lm: &w.lm,
        data: &w.data,
        bank: &w.bank,
        seed: 4,
        run_id: "t",
    };
    let mut st = AlignState::new(StagePlan::parse(&cfg.order, &cfg.stage_budgets).unwrap(), &w.lm, w.bank.len(), 4).unwrap();
    st.run_stage(&ctx, 0).unwrap();
    let ids = AlignState::eval_images(&ctx, 16);
    let before = st.evaluate(&ctx, 0, &ids).unwrap();
    st.run_stage(&ctx, 1).unwrap();
    let after = st.evaluate(&ctx, 0, &ids).unwrap();
    assert_eq!(before, after);
}

#[test]
fn grouped_stage_trains_all_its_experts() {
    let w = tiny();
    let mut cfg = tiny_cfg(0.5, true);
    cfg.order = "cap,all".into();
    let ctx = AlignContext {
        cfg: &cfg,
        optim: &w.optim,
        lm: &w.lm,
        data: &w.data,
        bank: &w.bank,
        seed: 5,
        run_id: "t",
    };
    let plan = StagePlan::parse(&cfg.order, &cfg.stage_budgets).unwrap();
    let mut st = AlignState::new(plan, &w.lm, w.bank.len(), 5).unwrap();
    st.run_stage(&ctx, 0).unwrap();
    let before = st.store.checksum("proj.seg.");
    let r = st.run_stage(&ctx, 1).unwrap();
    assert_eq!(r.records.len(), 18);
    assert_ne!(before, st.store.checksum("proj.seg."));
    assert!(st.cache.bitmap().iter().all(|&b| b));
}

#[test]
fn config_validation() {
    assert!(AlignConfig::default().validate().is_ok());
    assert!(AlignConfig { gate_probability: 1.5, ..Default::default() }.validate().is_err());
    assert!(AlignConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
    assert!(AlignConfig { order: "cap".into(), ..Default::default() }.validate().is_err());
    let off = AlignConfig { residual: false, ..Default::default() };
    assert_eq!(off.effective_gate_probability(), 0.0);
}
