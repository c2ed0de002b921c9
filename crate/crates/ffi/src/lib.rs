//! C ABI over the cilmp library.
//!
//! Every fallible function returns a [`CilmpStatus`]; on failure the message
//! is kept per thread and read with [`cilmp_last_error`]. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.
//! Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cilmp::concepts::{cka_heatmap, ConceptBank};
use cilmp::error::CilmpError;
use cilmp::harness::{evaluate_split, generate_dataset, load_checkpoint, save_checkpoint, train_full, ExperimentConfig, TrainedRun};
use cilmp::metrics::{evaluate, EvalBatch, MetricSet};
use cilmp::prompts::PromptMode;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CilmpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Format = 4,
    Numerical = 5,
    Dimension = 6,
    Io = 7,
    BufferTooSmall = 8,
    Other = 9,
    Panic = 10,
}

/// Test metrics of one run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CilmpMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub kappa: f64,
}

impl From<MetricSet> for CilmpMetrics {
    fn from(m: MetricSet) -> Self {
        CilmpMetrics {
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            macro_auc: m.macro_auc,
            kappa: m.kappa,
        }
    }
}

/// Opaque experiment configuration.
pub struct CilmpConfig(ExperimentConfig);

/// Opaque trained run: its report and the tuned model.
pub struct CilmpRun {
    config: ExperimentConfig,
    run: TrainedRun,
}

/// Opaque concept bank.
pub struct CilmpBank(ConceptBank);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &CilmpError) -> CilmpStatus {
    match e {
        CilmpError::Config(_) | CilmpError::Json(_) => CilmpStatus::Config,
        CilmpError::Format { .. } => CilmpStatus::Format,
        CilmpError::Numerical(_) => CilmpStatus::Numerical,
        CilmpError::Dimension { .. } | CilmpError::Label { .. } | CilmpError::Index { .. } | CilmpError::Length { .. } => {
            CilmpStatus::Dimension
        }
        CilmpError::Io(_) => CilmpStatus::Io,
        _ => CilmpStatus::Other,
    }
}

enum Failure {
    Status(CilmpStatus, String),
    Lib(CilmpError),
}

impl From<CilmpError> for Failure {
    fn from(e: CilmpError) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CilmpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CilmpStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            CilmpStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(CilmpStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(CilmpStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

/// Copies `s` with a terminating NUL into `buf` when it fits. `needed`
/// receives the full size including the NUL either way.
unsafe fn write_string(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Failure> {
    let size = s.len() + 1;
    if let Some(n) = needed.as_mut() {
        *n = size;
    }
    if buf.is_null() || len < size {
        return Err(Failure::Status(
            CilmpStatus::BufferTooSmall,
            format!("buffer of {len} bytes cannot hold {size}"),
        ));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

fn into_handle<T>(value: T, out: *mut *mut T) {
    // SAFETY: callers check `out` for null first.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cilmp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, with the sizing rules of
/// the other string getters. An empty string after a successful call.
#[no_mangle]
pub unsafe extern "C" fn cilmp_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> CilmpStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    let size = msg.len() + 1;
    if let Some(n) = needed.as_mut() {
        *n = size;
    }
    if buf.is_null() || len < size {
        return CilmpStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), msg.len());
    *buf.add(msg.len()) = 0;
    CilmpStatus::Ok
}

/// Default configuration.
#[no_mangle]
pub unsafe extern "C" fn cilmp_config_default(out: *mut *mut CilmpConfig) -> CilmpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        into_handle(CilmpConfig(ExperimentConfig::default()), out);
        Ok(())
    })
}

/// Configuration from JSON; omitted fields take their defaults.
#[no_mangle]
pub unsafe extern "C" fn cilmp_config_from_json(json: *const c_char, out: *mut *mut CilmpConfig) -> CilmpStatus {
    guard(|| {
        let text = as_str(json, "json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        into_handle(CilmpConfig(ExperimentConfig::from_json(text)?), out);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cilmp_config_set_seed(cfg: *mut CilmpConfig, seed: u64) -> CilmpStatus {
    guard(|| {
        as_mut(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// `mode` is one of `cilmp`, `no_rd`, `no_conditional`, `no_intervention`,
/// `coop_baseline`, `text_mode`.
#[no_mangle]
pub unsafe extern "C" fn cilmp_config_set_mode(cfg: *mut CilmpConfig, mode: *const c_char) -> CilmpStatus {
    guard(|| {
        let m = PromptMode::parse(as_str(mode, "mode")?)?;
        as_mut(cfg, "cfg")?.0.mode = m;
        Ok(())
    })
}

/// The configuration as JSON.
#[no_mangle]
pub unsafe extern "C" fn cilmp_config_to_json(
    cfg: *const CilmpConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> CilmpStatus {
    guard(|| write_string(&as_ref(cfg, "cfg")?.0.to_json(), buf, len, needed))
}

#[no_mangle]
pub unsafe extern "C" fn cilmp_config_free(cfg: *mut CilmpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Pretrains, freezes and tunes a model for `cfg`.
#[no_mangle]
pub unsafe extern "C" fn cilmp_train(cfg: *const CilmpConfig, out: *mut *mut CilmpRun) -> CilmpStatus {
    guard(|| {
        let config = as_ref(cfg, "cfg")?.0.clone();
        if out.is_null() {
            return Err(null("out"));
        }
        let run = train_full(&config)?;
        into_handle(CilmpRun { config, run }, out);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cilmp_run_metrics(run: *const CilmpRun, out: *mut CilmpMetrics) -> CilmpStatus {
    guard(|| {
        let m = as_ref(run, "run")?.run.report.metrics;
        *as_mut(out, "out")? = m.into();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cilmp_run_trainable_params(run: *const CilmpRun, out: *mut usize) -> CilmpStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(run, "run")?.run.report.trainable_param_count;
        Ok(())
    })
}

/// The run report as JSON.
#[no_mangle]
pub unsafe extern "C" fn cilmp_run_report_json(
    run: *const CilmpRun,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> CilmpStatus {
    guard(|| write_string(&as_ref(run, "run")?.run.report.to_json(), buf, len, needed))
}

#[no_mangle]
pub unsafe extern "C" fn cilmp_run_save_checkpoint(run: *const CilmpRun, path: *const c_char) -> CilmpStatus {
    guard(|| {
        let r = as_ref(run, "run")?;
        save_checkpoint(as_str(path, "path")?, &r.config, &r.run.model)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cilmp_run_free(run: *mut CilmpRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Restores a checkpoint and evaluates it on the test split of its world.
#[no_mangle]
pub unsafe extern "C" fn cilmp_checkpoint_eval(path: *const c_char, out: *mut CilmpMetrics) -> CilmpStatus {
    guard(|| {
        let ckpt = load_checkpoint(as_str(path, "path")?)?;
        let out = as_mut(out, "out")?;
        let (ds, bank) = generate_dataset(&ckpt.config)?;
        let model = ckpt.restore(&ds, &bank)?;
        *out = evaluate_split(&model, &ds.test)?.into();
        Ok(())
    })
}

/// The concept bank of the world described by `cfg`.
#[no_mangle]
pub unsafe extern "C" fn cilmp_bank_generate(cfg: *const CilmpConfig, out: *mut *mut CilmpBank) -> CilmpStatus {
    guard(|| {
        let config = &as_ref(cfg, "cfg")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        into_handle(CilmpBank(generate_dataset(config)?.1), out);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cilmp_bank_load(path: *const c_char, out: *mut *mut CilmpBank) -> CilmpStatus {
    guard(|| {
        let bank = ConceptBank::load(as_str(path, "path")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        into_handle(CilmpBank(bank), out);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cilmp_bank_save(bank: *const CilmpBank, path: *const c_char) -> CilmpStatus {
    guard(|| {
        as_ref(bank, "bank")?.0.save(as_str(path, "path")?)?;
        Ok(())
    })
}

/// Number of classes, layers and the width of a bank; any out pointer may
/// be null.
#[no_mangle]
pub unsafe extern "C" fn cilmp_bank_shape(
    bank: *const CilmpBank,
    classes: *mut usize,
    seq_len: *mut usize,
    width: *mut usize,
) -> CilmpStatus {
    guard(|| {
        let b = &as_ref(bank, "bank")?.0;
        for (p, v) in [(classes, b.num_classes()), (seq_len, b.seq_len()), (width, b.width())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Layer-to-layer CKA of one class, row-major into `out` of `len` values,
/// which must hold `seq_len²`.
#[no_mangle]
pub unsafe extern "C" fn cilmp_bank_cka(bank: *const CilmpBank, class_index: usize, out: *mut f64, len: usize) -> CilmpStatus {
    guard(|| {
        let m = cka_heatmap(&as_ref(bank, "bank")?.0, class_index)?;
        let n = m.size();
        if out.is_null() {
            return Err(null("out"));
        }
        if len < n * n {
            return Err(Failure::Status(
                CilmpStatus::BufferTooSmall,
                format!("CKA needs {} values, buffer holds {len}", n * n),
            ));
        }
        ptr::copy_nonoverlapping(m.values.data().as_ptr(), out, n * n);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cilmp_bank_free(bank: *mut CilmpBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Metrics of `n` samples over `classes` classes from integer labels and a
/// row-major `n × classes` score matrix.
#[no_mangle]
pub unsafe extern "C" fn cilmp_metrics_evaluate(
    labels: *const usize,
    scores: *const f64,
    n: usize,
    classes: usize,
    out: *mut CilmpMetrics,
) -> CilmpStatus {
    guard(|| {
        if labels.is_null() {
            return Err(null("labels"));
        }
        if scores.is_null() {
            return Err(null("scores"));
        }
        let out = as_mut(out, "out")?;
        let total = n.checked_mul(classes).ok_or_else(|| {
            Failure::Status(CilmpStatus::Dimension, "score matrix size overflows".into())
        })?;
        let y = std::slice::from_raw_parts(labels, n).to_vec();
        let s = std::slice::from_raw_parts(scores, total);
        let rows = if classes == 0 { Vec::new() } else { s.chunks(classes).map(<[f64]>::to_vec).collect() };
        *out = evaluate(&EvalBatch::new(y, rows)?)?.into();
        Ok(())
    })
}
