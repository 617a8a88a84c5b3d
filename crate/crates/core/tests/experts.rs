mod common;

use prealign::autodiff::{grad_check, AdamW, AdamWConfig, Tape, Tensor};
use prealign::data::{render, BBox, RenderedImage, SceneObject, SceneSpec};
use prealign::experts::*;
use prealign::params::{ParamError, ParamStore};
use rand::Rng;

fn image(shape: u8) -> RenderedImage {
    render(&SceneSpec {
        grid_size: 6,
        objects: vec![
            SceneObject {
                shape,
                color: 2,
                bbox: BBox { x0: 0, y0: 0, x1: 2, y1: 2 },
                z_order: 0,
            },
            SceneObject {
                shape: 7,
                color: 4,
                bbox: BBox { x0: 4, y0: 3, x1: 5, y1: 5 },
                z_order: 1,
            },
        ],
        seed: 0,
    })
}

#[test]
fn blank_classification_is_map_of_zero_histogram() {
    let blank = RenderedImage::blank(6);
    let k = ExpertKind::Classification;
    let f = extract(k, &blank);
    let zero = Tensor::zeros(&[k.tokens(6), k.raw_dim()]);
    assert_eq!(f, apply_fixed_map(k, &zero));
    assert_eq!(f.shape(), &[8, 16]);
}

#[test]
fn extraction_is_deterministic_with_fixed_shapes() {
    let img = image(1);
    for k in ExpertKind::ALL {
        let a = extract(k, &img);
        assert_eq!(a, extract(k, &img));
        assert_eq!(a.shape(), &[k.tokens(6), k.feat_dim()]);
        assert!(a.is_finite());
        assert!([16, 32].contains(&k.feat_dim()));
    }
}

#[test]
fn class_change_moves_classification_and_caption_features() {
    let (a, b) = (image(1), image(3));
    for k in [ExpertKind::Classification, ExpertKind::Caption] {
        assert!(extract(k, &a).max_abs_diff(&extract(k, &b)) > 1e-3, "{k}");
    }
}

#[test]
fn ordinals_are_coarse_to_fine() {
    let ords: Vec<usize> = ExpertKind::ALL.iter().map(|k| k.ordinal()).collect();
    assert_eq!(ords, [1, 2, 3, 4]);
    assert!(ExpertKind::Caption < ExpertKind::Segmentation);
    assert_eq!(ExpertKind::parse("seg"), Some(ExpertKind::Segmentation));
    assert_eq!(ExpertKind::parse("recognization"), Some(ExpertKind::Classification));
    assert_eq!(ExpertKind::parse("Detection"), Some(ExpertKind::Detection));
    assert_eq!(ExpertKind::parse("depth"), None);
}

fn store_with(p: &Projector, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    p.register(&mut s, &mut common::rng(seed)).unwrap();
    s
}

#[test]
fn zero_projector_gives_zero_output() {
    let p = Projector::new(ExpertKind::Detection, 64);
    let mut s = store_with(&p, 1);
    for e in s.entries().to_vec() {
        s.set(&e.name, Tensor::zeros(e.value.shape())).unwrap();
    }
    let mut t = Tape::new();
    let b = s.bind(&mut t);
    let x = t.constant(extract(ExpertKind::Detection, &image(2)));
    let y = p.forward(&mut t, &b, x).unwrap();
    assert_eq!(t.value(y).shape(), &[4, 64]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_projector_passes_input_through() {
    let p = Projector {
        kind: ExpertKind::Segmentation,
        d_in: 32,
        d_out: 32,
        activation: Activation::Identity,
    };
    let mut s = store_with(&p, 1);
    s.set("proj.seg.w1", Tensor::identity(32)).unwrap();
    s.set("proj.seg.w2", Tensor::identity(32)).unwrap();
    let feats = extract(ExpertKind::Segmentation, &image(5));
    let mut t = Tape::new();
    let b = s.bind(&mut t);
    let x = t.constant(feats.clone());
    let y = p.forward(&mut t, &b, x).unwrap();
    assert_eq!(t.value(y), &feats);
}

#[test]
fn projector_rejects_width_mismatch() {
    let p = Projector::new(ExpertKind::Caption, 64);
    let s = store_with(&p, 1);
    let mut t = Tape::new();
    let b = s.bind(&mut t);
    let x = t.constant(Tensor::zeros(&[1, 16]));
    assert!(p.forward(&mut t, &b, x).is_err());
}

#[test]
fn projector_gradients_match_finite_differences() {
    let p = Projector::new(ExpertKind::Classification, 64);
    let s = store_with(&p, 3);
    let feats = extract(ExpertKind::Classification, &image(4));
    let mut rng = common::rng(9);
    let w = common::rand_tensor(&mut rng, &[8, 64], -1.0, 1.0);
    for name in ["proj.cls.w1", "proj.cls.b1", "proj.cls.w2", "proj.cls.b2"] {
        let point = s.get(name).unwrap().clone();
        let coords: Vec<usize> = (0..40).map(|_| rng.gen_range(0..point.len())).collect();
        let report = grad_check(
            |t, x| {
                let b = s.bind(t).with_var(name, x);
                let f = t.constant(feats.clone());
                let y = p.forward(t, &b, f)?;
                common::weighted_sum(t, y, &w)
            },
            &point,
            1e-4,
            Some(&coords),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {}", report.max_rel_error);
    }
}

fn train_steps(s: &mut ParamStore, p: &Projector, steps: usize) {
    let feats = extract(p.kind, &image(1));
    let mut opt = AdamW::new(AdamWConfig::default());
    for _ in 0..steps {
        let mut t = Tape::new();
        let b = s.bind(&mut t);
        let x = t.constant(feats.clone());
        let y = p.forward(&mut t, &b, x).unwrap();
        let sq = t.mul(y, y).unwrap();
        let loss = t.mean(sq);
        let g = t.backward(loss).unwrap();
        s.apply(&mut opt, &b, &g, 1e-3).unwrap();
    }
}

#[test]
fn frozen_parameters_are_bit_identical_after_training() {
    let p = Projector::new(ExpertKind::Caption, 64);
    let q = Projector::new(ExpertKind::Detection, 64);
    let mut s = store_with(&p, 4);
    q.register(&mut s, &mut common::rng(5)).unwrap();
    s.set_frozen("proj.cap.", true).unwrap();
    let before = s.clone();
    let sum = s.checksum("proj.cap.");
    train_steps(&mut s, &p, 100);
    assert_eq!(s.checksum("proj.cap."), sum);
    for e in before.entries().iter().filter(|e| e.name.starts_with("proj.cap.")) {
        assert_eq!(s.get(&e.name).unwrap(), &e.value);
    }

    s.set_frozen("proj.cap.", false).unwrap();
    train_steps(&mut s, &p, 5);
    assert_ne!(s.checksum("proj.cap."), sum);
}

#[test]
fn unknown_parameter_set_rejected() {
    let mut s = store_with(&Projector::new(ExpertKind::Caption, 64), 1);
    assert_eq!(
        s.set_frozen("proj.seg.", true),
        Err(ParamError::UnknownSet("proj.seg.".into()))
    );
    assert_eq!(s.set_frozen("proj.cap.w1", true), Ok(1));
    assert_eq!(s.set_frozen("proj.", true), Ok(4));
}
