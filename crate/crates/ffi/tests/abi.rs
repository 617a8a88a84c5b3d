use std::ffi::{CStr, CString};
use std::ptr;

use prealign_ffi::*;

const TINY: &str = r#"
seed = 5
[data]
train_size = 32
eval_size = 8
[lm]
d_model = 16
heads = 2
[align]
stage_budgets = [4, 2, 2, 2]
batch_size = 4
eval_every = 2
eval_images = 4
[moe]
adapter_hidden = 8
[moco]
queue_size = 8
[train]
steps = 4
batch_size = 4
eval_every = 2
eval_images = 4
[eval]
images = 8
"#;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe { pa_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn c(s: &std::path::Path) -> CString {
    CString::new(s.to_str().unwrap()).unwrap()
}

#[test]
fn route_through_the_abi() {
    let logits = [2.0, 1.0, 0.5, -1.0];
    let mut p = [f64::NAN; 4];
    assert_eq!(unsafe { pa_route(logits.as_ptr(), 3, 0, p.as_mut_ptr()) }, PaStatus::Ok);
    let want = [0.6285, 0.2312, 0.1403, 0.0];
    for (a, b) in p.iter().zip(want) {
        assert!((a - b).abs() < 1e-4);
    }
    assert_eq!(p[3], 0.0);
    assert_eq!(unsafe { pa_route(logits.as_ptr(), 0, 0, p.as_mut_ptr()) }, PaStatus::Config);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { pa_route(ptr::null(), 2, 0, p.as_mut_ptr()) }, PaStatus::NullArgument);
    assert_eq!(unsafe { pa_route(logits.as_ptr(), 2, 1, p.as_mut_ptr()) }, PaStatus::Ok);
    assert!(p[2] > 0.0 && p[3] > 0.0);
}

#[test]
fn config_handles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pa_config_default();
    let mut hash = [0 as std::ffi::c_char; 65];
    assert_eq!(unsafe { pa_config_hash(cfg, hash.as_mut_ptr(), hash.len()) }, 64);
    let h1 = unsafe { CStr::from_ptr(hash.as_ptr()) }.to_owned();
    assert_eq!(unsafe { pa_config_set_seed(cfg, 77) }, PaStatus::Ok);
    unsafe { pa_config_hash(cfg, hash.as_mut_ptr(), hash.len()) };
    assert_ne!(unsafe { CStr::from_ptr(hash.as_ptr()) }, h1.as_c_str());
    assert_eq!(unsafe { pa_config_set_topk(cfg, 9) }, PaStatus::Config);
    assert_eq!(unsafe { pa_config_set_topk(cfg, 2) }, PaStatus::Ok);
    unsafe { pa_config_free(cfg) };
    unsafe { pa_config_free(ptr::null_mut()) };

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[moe]\ntopk = 2\n").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pa_config_load(c(&bad).as_ptr(), &mut out) }, PaStatus::Config);
    assert!(out.is_null());
    assert!(last_error().contains("topk"), "{}", last_error());
    assert_eq!(unsafe { pa_config_load(ptr::null(), &mut out) }, PaStatus::NullArgument);
    let short = unsafe { pa_last_error(ptr::null_mut(), 0) };
    assert_eq!(short, last_error().len());
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { pa_config_load(c(&path).as_ptr(), &mut cfg) }, PaStatus::Ok);
    let out = c(dir.path());
    assert_eq!(unsafe { pa_gen_data(cfg, out.as_ptr()) }, PaStatus::Ok);
    assert_eq!(unsafe { pa_align(cfg, out.as_ptr(), 0) }, PaStatus::Ok, "{}", last_error());
    let align = c(&dir.path().join("align.ckpt"));
    assert_eq!(unsafe { pa_train(cfg, align.as_ptr(), out.as_ptr()) }, PaStatus::Ok, "{}", last_error());
    let missing = c(&dir.path().join("none.ckpt"));
    assert_eq!(unsafe { pa_train(cfg, missing.as_ptr(), out.as_ptr()) }, PaStatus::Runtime);

    let mut ck = ptr::null_mut();
    assert_eq!(unsafe { pa_checkpoint_load(align.as_ptr(), &mut ck) }, PaStatus::Ok);
    assert_eq!(unsafe { pa_checkpoint_kind(ck) }, PA_CHECKPOINT_ALIGN);
    let mut scores = [PaTaskScore::default(); PA_NUM_TASKS];
    assert_eq!(unsafe { pa_checkpoint_evaluate(ck, scores.as_mut_ptr()) }, PaStatus::Config);
    unsafe { pa_checkpoint_free(ck) };

    let train = c(&dir.path().join("train.ckpt"));
    assert_eq!(unsafe { pa_checkpoint_load(train.as_ptr(), &mut ck) }, PaStatus::Ok);
    assert_eq!(unsafe { pa_checkpoint_kind(ck) }, PA_CHECKPOINT_TRAIN);
    assert_eq!(unsafe { pa_checkpoint_evaluate(ck, scores.as_mut_ptr()) }, PaStatus::Ok);
    for s in scores {
        assert_eq!(s.samples, 8);
        assert!((0.0..=1.0).contains(&s.accuracy));
        assert!((s.gate_means.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    unsafe { pa_checkpoint_free(ck) };
    assert_eq!(unsafe { pa_checkpoint_kind(ptr::null()) }, -1);

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"garbage").unwrap();
    assert_eq!(unsafe { pa_checkpoint_load(c(&junk).as_ptr(), &mut ck) }, PaStatus::Runtime);
    unsafe { pa_config_free(cfg) };
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(pa_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
