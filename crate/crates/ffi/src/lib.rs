//! C ABI for the prealign library.
//!
//! Objects cross the boundary as opaque pointers (`PaConfig`,
//! `PaCheckpoint`) that the caller frees with the matching `*_free`
//! function. Every fallible entry point returns a [`PaStatus`]; the message
//! of the most recent failure on the calling thread is available through
//! [`pa_last_error`]. Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use prealign::harness::{
    cmd_align, cmd_gen_data, cmd_train, Checkpoint, CheckpointKind, ExperimentConfig, HarnessError, Workspace,
};
use prealign::moe::{route_logits, GateVariant, NUM_EXPERTS};
use prealign::training::Task;

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid configuration or argument value.
    Config = 2,
    /// Runtime failure: I/O, corrupt checkpoint, numerical error.
    Runtime = 3,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 4,
    /// An internal panic was caught at the boundary.
    Panic = 5,
}

/// Opaque experiment configuration.
pub struct PaConfig(ExperimentConfig);

/// Opaque alignment or training checkpoint.
pub struct PaCheckpoint(Checkpoint);

/// Scores of one evaluation task.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PaTaskScore {
    pub samples: u64,
    pub accuracy: f64,
    pub token_accuracy: f64,
    /// Mean gate probability per expert: caption, classification,
    /// detection, segmentation.
    pub gate_means: [f64; 4],
}

pub const PA_NUM_EXPERTS: usize = 4;
pub const PA_NUM_TASKS: usize = 4;
pub const PA_CHECKPOINT_ALIGN: i32 = 0;
pub const PA_CHECKPOINT_TRAIN: i32 = 1;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: PaStatus, msg: impl Into<String>) -> PaStatus {
    set_error(msg);
    status
}

fn from_harness(e: HarnessError) -> PaStatus {
    let status = if e.is_config() { PaStatus::Config } else { PaStatus::Runtime };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> PaStatus) -> PaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == PaStatus::Ok {
                set_error("");
            }
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(PaStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, PaStatus> {
    if p.is_null() {
        return Err(fail(PaStatus::NullArgument, "null path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(PaStatus::InvalidUtf8, "path is not valid UTF-8"))
}

/// Copies `s` NUL-terminated into `buf` (truncating if needed) and returns
/// the full length in bytes, excluding the terminator.
unsafe fn write_str(s: &str, buf: *mut c_char, len: usize) -> usize {
    if !buf.is_null() && len > 0 {
        let n = s.len().min(len - 1);
        std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), n);
        *buf.add(n) = 0;
    }
    s.len()
}

/// Message of the last failed call on this thread. Returns the message
/// length; pass a null buffer to query it.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pa_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| write_str(&e.borrow(), buf, len))
}

/// A configuration with every default value.
#[no_mangle]
pub extern "C" fn pa_config_default() -> *mut PaConfig {
    Box::into_raw(Box::new(PaConfig(ExperimentConfig::default())))
}

/// Loads and validates a TOML or JSON config file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pa_config_load(path: *const c_char, out: *mut *mut PaConfig) -> PaStatus {
    guard(|| {
        if out.is_null() {
            return fail(PaStatus::NullArgument, "null output pointer");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ExperimentConfig::load(&path).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(PaConfig(c)));
                PaStatus::Ok
            }
            Err(e) => from_harness(e),
        }
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pa_config_free(cfg: *mut PaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn pa_config_set_seed(cfg: *mut PaConfig, seed: u64) -> PaStatus {
    match cfg.as_mut() {
        Some(c) => {
            c.0.seed = seed;
            PaStatus::Ok
        }
        None => fail(PaStatus::NullArgument, "null config"),
    }
}

/// Number of experts the router keeps (1..=4).
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn pa_config_set_topk(cfg: *mut PaConfig, k: u32) -> PaStatus {
    let Some(c) = cfg.as_mut() else {
        return fail(PaStatus::NullArgument, "null config");
    };
    if !(1..=NUM_EXPERTS as u32).contains(&k) {
        return fail(PaStatus::Config, format!("top-k {k} outside 1..=4"));
    }
    c.0.moe.top_k = k as usize;
    PaStatus::Ok
}

/// Writes the config's SHA-256 hex hash (64 characters) into `buf` and
/// returns its length.
///
/// # Safety
/// `cfg` must be a live config handle; `buf` null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pa_config_hash(cfg: *const PaConfig, buf: *mut c_char, len: usize) -> usize {
    match cfg.as_ref() {
        Some(c) => write_str(&c.0.hash(), buf, len),
        None => 0,
    }
}

/// Writes the synthetic dataset into `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle and `out_dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pa_gen_data(cfg: *const PaConfig, out_dir: *const c_char) -> PaStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return fail(PaStatus::NullArgument, "null config");
        };
        match path_arg(out_dir) {
            Ok(out) => cmd_gen_data(&c.0, &out).map_or_else(from_harness, |_| PaStatus::Ok),
            Err(s) => s,
        }
    })
}

/// Runs the staged alignment, writing checkpoints and metrics to
/// `out_dir`. A non-zero `resume` continues from the latest stage
/// checkpoint found there.
///
/// # Safety
/// `cfg` must be a live handle and `out_dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pa_align(cfg: *const PaConfig, out_dir: *const c_char, resume: i32) -> PaStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return fail(PaStatus::NullArgument, "null config");
        };
        match path_arg(out_dir) {
            Ok(out) => cmd_align(&c.0, None, &out, resume != 0).map_or_else(from_harness, |_| PaStatus::Ok),
            Err(s) => s,
        }
    })
}

/// Trains from the alignment checkpoint at `align_path`.
///
/// # Safety
/// `cfg` must be a live handle; the paths NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pa_train(
    cfg: *const PaConfig,
    align_path: *const c_char,
    out_dir: *const c_char,
) -> PaStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return fail(PaStatus::NullArgument, "null config");
        };
        let (align, out) = match (path_arg(align_path), path_arg(out_dir)) {
            (Ok(a), Ok(o)) => (a, o),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        cmd_train(&c.0, None, &align, &out).map_or_else(from_harness, |_| PaStatus::Ok)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pa_checkpoint_load(path: *const c_char, out: *mut *mut PaCheckpoint) -> PaStatus {
    guard(|| {
        if out.is_null() {
            return fail(PaStatus::NullArgument, "null output pointer");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Checkpoint::load(&path) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(PaCheckpoint(ck)));
                PaStatus::Ok
            }
            Err(e) => from_harness(e),
        }
    })
}

/// # Safety
/// `ck` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pa_checkpoint_free(ck: *mut PaCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// `PA_CHECKPOINT_ALIGN`, `PA_CHECKPOINT_TRAIN`, or -1 for a null handle.
///
/// # Safety
/// `ck` must be null or a live checkpoint handle.
#[no_mangle]
pub unsafe extern "C" fn pa_checkpoint_kind(ck: *const PaCheckpoint) -> i32 {
    match ck.as_ref().map(|c| c.0.kind) {
        Some(CheckpointKind::Align) => PA_CHECKPOINT_ALIGN,
        Some(CheckpointKind::Train) => PA_CHECKPOINT_TRAIN,
        None => -1,
    }
}

/// Evaluates a training checkpoint on the eval split of its own config.
/// `out` receives one score per task in the order caption, presence,
/// count, location.
///
/// # Safety
/// `ck` must be a live handle; `out` valid for `PA_NUM_TASKS` elements.
#[no_mangle]
pub unsafe extern "C" fn pa_checkpoint_evaluate(ck: *const PaCheckpoint, out: *mut PaTaskScore) -> PaStatus {
    guard(|| {
        let (Some(c), false) = (ck.as_ref(), out.is_null()) else {
            return fail(PaStatus::NullArgument, "null checkpoint or output");
        };
        if c.0.kind != CheckpointKind::Train {
            return fail(PaStatus::Config, "evaluation needs a training checkpoint");
        }
        let report = match Workspace::new(c.0.config.clone(), None).and_then(|ws| ws.evaluate(&c.0.params, &Task::ALL)) {
            Ok(r) => r,
            Err(e) => return from_harness(e),
        };
        let out = std::slice::from_raw_parts_mut(out, PA_NUM_TASKS);
        for (slot, task) in out.iter_mut().zip(Task::ALL) {
            let Some(s) = report.task(task) else {
                return fail(PaStatus::Runtime, format!("report lacks task {}", task.name()));
            };
            let mut gate_means = [0.0; 4];
            gate_means.copy_from_slice(&s.gate_means);
            *slot = PaTaskScore {
                samples: s.samples as u64,
                accuracy: s.accuracy,
                token_accuracy: s.token_accuracy,
                gate_means,
            };
        }
        PaStatus::Ok
    })
}

/// Top-k gate probabilities for four router logits. Excluded experts get
/// exactly zero unless `literal` is non-zero, which selects the variant
/// that zeroes excluded logits instead of masking them.
///
/// # Safety
/// `logits` and `probs` must each be valid for four `f64`s.
#[no_mangle]
pub unsafe extern "C" fn pa_route(logits: *const f64, k: u32, literal: i32, probs: *mut f64) -> PaStatus {
    guard(|| {
        if logits.is_null() || probs.is_null() {
            return fail(PaStatus::NullArgument, "null logits or output");
        }
        let mut w = [0.0; NUM_EXPERTS];
        w.copy_from_slice(std::slice::from_raw_parts(logits, NUM_EXPERTS));
        let variant = if literal != 0 { GateVariant::Literal } else { GateVariant::Renorm };
        match route_logits(&w, k as usize, variant) {
            Ok(d) => {
                std::slice::from_raw_parts_mut(probs, NUM_EXPERTS).copy_from_slice(&d.probs);
                PaStatus::Ok
            }
            Err(e) => fail(PaStatus::Config, e.to_string()),
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
