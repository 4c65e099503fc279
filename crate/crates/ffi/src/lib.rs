//! C ABI over the pipeline: opaque handles, integer status codes, and a
//! thread-local last-error message. The header is generated by cbindgen at
//! build time into `include/rellax.h`.
//!
//! Ownership rules: every `*_new`-style constructor hands the caller an
//! opaque pointer that must be released with the matching `*_free`; all other
//! functions borrow. Strings returned by `rlx_version`/`rlx_last_error` are
//! owned by the library and must not be freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;


use rellax::config::RunConfig;
use rellax::eval::evaluate;
use rellax::run::{build_pipeline, BuiltPipeline};
use rellax::train::{forward_sample, init_trainables, train_rellax, PipelineKnobs, Trainables};

/// Status code for every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlxStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    RuntimeError = 3,
    Utf8Error = 4,
}

/// Aggregate metrics for one evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RlxMetrics {
    pub auc: f64,
    pub logloss: f64,
    pub acc: f64,
    pub n: usize,
}

/// Opaque: a fully built pipeline (frozen models, samples, config).
pub struct RlxPipeline {
    config: RunConfig,
    built: BuiltPipeline,
}

/// Opaque: trained adapter stack plus the knobs it was trained with.
pub struct RlxTrained {
    trainables: Trainables,
    knobs: PipelineKnobs,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: impl Into<String>) {
    let message = message.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(message.replace('\0', "?")).unwrap_or_default();
    });
}

fn clear_error() {
    set_error("");
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rlx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread; empty when the last
/// call succeeded. Owned by the library.
#[no_mangle]
pub extern "C" fn rlx_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, RlxStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(RlxStatus::NullArgument);
    }
    // SAFETY: caller guarantees a NUL-terminated string
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        RlxStatus::Utf8Error
    })
}

fn build_into(config: RunConfig, out: *mut *mut RlxPipeline) -> RlxStatus {
    match build_pipeline(&config) {
        Ok(built) => {
            let handle = Box::new(RlxPipeline { config, built });
            // SAFETY: out checked non-null by callers
            unsafe { *out = Box::into_raw(handle) };
            clear_error();
            RlxStatus::Ok
        }
        Err(err) => {
            set_error(err.to_string());
            RlxStatus::RuntimeError
        }
    }
}

/// Build a pipeline from a TOML config file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rlx_pipeline_from_config_file(path: *const c_char, out: *mut *mut RlxPipeline) -> RlxStatus {
    if out.is_null() {
        set_error("null output pointer");
        return RlxStatus::NullArgument;
    }
    let path = match unsafe { cstr_arg(path) } {
        Ok(p) => PathBuf::from(p),
        Err(status) => return status,
    };
    match RunConfig::from_file(&path) {
        Ok(config) => build_into(config, out),
        Err(err) => {
            set_error(err.to_string());
            RlxStatus::InvalidArgument
        }
    }
}

/// Build a pipeline from TOML text (an empty string selects the defaults).
///
/// # Safety
/// `toml_text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rlx_pipeline_from_config_text(toml_text: *const c_char, out: *mut *mut RlxPipeline) -> RlxStatus {
    if out.is_null() {
        set_error("null output pointer");
        return RlxStatus::NullArgument;
    }
    let text = match unsafe { cstr_arg(toml_text) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    match RunConfig::from_toml_str(text) {
        Ok(config) => build_into(config, out),
        Err(err) => {
            set_error(err.to_string());
            RlxStatus::InvalidArgument
        }
    }
}

/// Release a pipeline handle. Null is a no-op.
///
/// # Safety
/// `pipeline` must have come from a `rlx_pipeline_from_*` call and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rlx_pipeline_free(pipeline: *mut RlxPipeline) {
    if !pipeline.is_null() {
        drop(unsafe { Box::from_raw(pipeline) });
    }
}

/// Number of train/test samples behind a pipeline.
///
/// # Safety
/// All pointers must be valid; `pipeline` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rlx_pipeline_counts(
    pipeline: *const RlxPipeline,
    train: *mut usize,
    test: *mut usize,
) -> RlxStatus {
    if pipeline.is_null() || train.is_null() || test.is_null() {
        set_error("null argument");
        return RlxStatus::NullArgument;
    }
    let pipeline = unsafe { &*pipeline };
    unsafe {
        *train = pipeline.built.train_samples().len();
        *test = pipeline.built.test_samples().len();
    }
    clear_error();
    RlxStatus::Ok
}

/// Train adapters with the pipeline's configured variant and seed.
///
/// # Safety
/// `pipeline` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rlx_train(pipeline: *const RlxPipeline, out: *mut *mut RlxTrained) -> RlxStatus {
    if pipeline.is_null() || out.is_null() {
        set_error("null argument");
        return RlxStatus::NullArgument;
    }
    let pipeline = unsafe { &*pipeline };
    let result = (|| {
        let cfg = pipeline.config.train_config()?;
        let trainables = init_trainables(&pipeline.built.frozen, &cfg)?;
        let (trained, _, _) = train_rellax(&pipeline.built.frozen, trainables, &pipeline.built.train_samples(), &cfg)?;
        Ok::<_, rellax::Error>(RlxTrained {
            trainables: trained,
            knobs: cfg.knobs,
        })
    })();
    match result {
        Ok(trained) => {
            unsafe { *out = Box::into_raw(Box::new(trained)) };
            clear_error();
            RlxStatus::Ok
        }
        Err(err) => {
            set_error(err.to_string());
            RlxStatus::RuntimeError
        }
    }
}

/// Release a trained handle. Null is a no-op.
///
/// # Safety
/// `trained` must have come from `rlx_train` and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rlx_trained_free(trained: *mut RlxTrained) {
    if !trained.is_null() {
        drop(unsafe { Box::from_raw(trained) });
    }
}

/// Evaluate on the test split. `trained` may be null for the adapter-free
/// base configuration.
///
/// # Safety
/// `pipeline` must be live, `trained` live or null, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rlx_evaluate(
    pipeline: *const RlxPipeline,
    trained: *const RlxTrained,
    out: *mut RlxMetrics,
) -> RlxStatus {
    if pipeline.is_null() || out.is_null() {
        set_error("null argument");
        return RlxStatus::NullArgument;
    }
    let pipeline = unsafe { &*pipeline };
    let trained = unsafe { trained.as_ref() };
    let result = (|| {
        let knobs = match trained {
            Some(t) => t.knobs,
            None => pipeline.config.eval_knobs()?,
        };
        evaluate(
            &pipeline.built.frozen,
            trained.map(|t| &t.trainables),
            &pipeline.built.test_samples(),
            &knobs,
            "ffi",
        )
    })();
    match result {
        Ok(report) => {
            unsafe {
                *out = RlxMetrics {
                    auc: report.auc,
                    logloss: report.logloss,
                    acc: report.acc,
                    n: report.labels.len(),
                };
            }
            clear_error();
            RlxStatus::Ok
        }
        Err(err) => {
            set_error(err.to_string());
            RlxStatus::RuntimeError
        }
    }
}

/// Pointwise click probability and label for one test sample.
///
/// # Safety
/// `pipeline` must be live, `trained` live or null, outputs valid.
#[no_mangle]
pub unsafe extern "C" fn rlx_score_sample(
    pipeline: *const RlxPipeline,
    trained: *const RlxTrained,
    test_index: usize,
    score: *mut f64,
    label: *mut u8,
) -> RlxStatus {
    if pipeline.is_null() || score.is_null() || label.is_null() {
        set_error("null argument");
        return RlxStatus::NullArgument;
    }
    let pipeline = unsafe { &*pipeline };
    let trained = unsafe { trained.as_ref() };
    let test = pipeline.built.test_samples();
    let Some(sample) = test.get(test_index) else {
        set_error(format!("test index {test_index} out of range ({} samples)", test.len()));
        return RlxStatus::InvalidArgument;
    };
    let knobs = match trained {
        Some(t) => t.knobs,
        None => match pipeline.config.eval_knobs() {
            Ok(k) => k,
            Err(err) => {
                set_error(err.to_string());
                return RlxStatus::InvalidArgument;
            }
        },
    };
    match forward_sample(&pipeline.built.frozen, trained.map(|t| &t.trainables), sample, &knobs, None) {
        Ok(state) => {
            unsafe {
                *score = state.score;
                *label = sample.label;
            }
            clear_error();
            RlxStatus::Ok
        }
        Err(err) => {
            set_error(err.to_string());
            RlxStatus::RuntimeError
        }
    }
}

/// AUC of scores against binary labels (ties get half credit).
///
/// # Safety
/// `labels` and `scores` must point to `n` readable elements; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rlx_auc(labels: *const u8, scores: *const f64, n: usize, out: *mut f64) -> RlxStatus {
    if labels.is_null() || scores.is_null() || out.is_null() {
        set_error("null argument");
        return RlxStatus::NullArgument;
    }
    let labels = unsafe { std::slice::from_raw_parts(labels, n) };
    let scores = unsafe { std::slice::from_raw_parts(scores, n) };
    match rellax::metrics::compute_auc(labels, scores) {
        Ok(auc) => {
            unsafe { *out = auc };
            clear_error();
            RlxStatus::Ok
        }
        Err(err) => {
            set_error(err.to_string());
            RlxStatus::InvalidArgument
        }
    }
}

/// Two-term softmax over answer logits: `sigmoid(yes - no)`.
#[no_mangle]
pub extern "C" fn rlx_pointwise_score(yes_logit: f64, no_logit: f64) -> f64 {
    let logits = [yes_logit, no_logit];
    rellax::lm::pointwise_score(&logits, 0, 1)
}
