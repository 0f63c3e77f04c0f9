//! C ABI over the online fair forest learner.
//!
//! Every function returns an [`FfStatus`]; on failure a description is kept
//! per thread and can be read with [`ff_last_error_message`]. Handles are
//! opaque and must be released with [`ff_learner_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fairforest::error::Error;
use fairforest::gradients::HuberParams;
use fairforest::learner::{Learner, LearnerConfig, OnlineLearner};
use fairforest::ForestShape;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    InvalidInput = 3,
    Numerical = 4,
    Serialization = 5,
    Panic = 6,
}

/// Opaque learner handle.
pub struct FfLearner {
    inner: Learner,
}

/// Running metrics; parity fields are NaN until both groups are observed.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfMetrics {
    pub steps: u64,
    pub accuracy: f64,
    pub dp_hard: f64,
    pub dp_soft: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FfStatus {
    match err.root() {
        Error::Config(_) | Error::Precondition(_) => FfStatus::InvalidConfig,
        Error::Numerical(_) => FfStatus::Numerical,
        Error::Json(_) | Error::Io(_) | Error::Csv(_) => FfStatus::Serialization,
        _ => FfStatus::InvalidInput,
    }
}

fn guard<F: FnOnce() -> Result<(), (FfStatus, String)>>(f: F) -> FfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside fairforest".into());
            FfStatus::Panic
        }
    }
}

fn lib<T>(r: fairforest::Result<T>) -> Result<T, (FfStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FfStatus, String) {
    (FfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn features<'a>(x: *const f64, len: usize) -> Result<&'a [f64], (FfStatus, String)> {
    if x.is_null() {
        return Err(null("feature pointer"));
    }
    // SAFETY: caller guarantees `x` points to `len` readable doubles.
    Ok(unsafe { std::slice::from_raw_parts(x, len) })
}

/// Creates a node-constrained demographic-parity learner and stores its
/// handle in `*out`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ff_learner_new(
    dim: usize,
    classes: usize,
    height: usize,
    trees: usize,
    lambda: f64,
    delta: f64,
    seed: u64,
    out: *mut *mut FfLearner,
) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output handle"));
        }
        let mut config = lib(LearnerConfig::new(dim, classes, lambda))?;
        config.shape = lib(ForestShape::new(height, trees, dim, classes))?;
        config.huber = lib(HuberParams::new(delta, lambda))?;
        config.seed = seed;
        let inner = lib(Learner::new(config))?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(FfLearner { inner })) };
        Ok(())
    })
}

/// Restores a learner from a checkpoint produced by [`ff_learner_checkpoint`].
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ff_learner_from_checkpoint(json: *const c_char, out: *mut *mut FfLearner) -> FfStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("checkpoint string"));
        }
        if out.is_null() {
            return Err(null("output handle"));
        }
        // SAFETY: caller guarantees a NUL-terminated string.
        let text = unsafe { CStr::from_ptr(json) }
            .to_str()
            .map_err(|e| (FfStatus::Serialization, format!("checkpoint is not UTF-8: {e}")))?;
        let inner = lib(Learner::from_checkpoint(text))?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(FfLearner { inner })) };
        Ok(())
    })
}

/// Predicts on `x`, then learns from `(y, a)`; the prediction made before the
/// update is written to `*pred`.
///
/// # Safety
/// `handle` must come from this library; `x` must hold `len` doubles; `pred`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_learner_step(
    handle: *mut FfLearner,
    x: *const f64,
    len: usize,
    y: usize,
    a: usize,
    pred: *mut usize,
) -> FfStatus {
    guard(|| {
        // SAFETY: caller guarantees the handle is live and unaliased.
        let learner = unsafe { handle.as_mut() }.ok_or_else(|| null("handle"))?;
        if pred.is_null() {
            return Err(null("prediction output"));
        }
        let x = unsafe { features(x, len) }?;
        let rec = lib(learner.inner.step(x, y, a))?;
        // SAFETY: checked non-null above.
        unsafe { *pred = rec.pred };
        Ok(())
    })
}

/// Predicts without learning.
///
/// # Safety
/// As for [`ff_learner_step`].
#[no_mangle]
pub unsafe extern "C" fn ff_learner_predict(
    handle: *const FfLearner,
    x: *const f64,
    len: usize,
    pred: *mut usize,
) -> FfStatus {
    guard(|| {
        // SAFETY: caller guarantees the handle is live.
        let learner = unsafe { handle.as_ref() }.ok_or_else(|| null("handle"))?;
        if pred.is_null() {
            return Err(null("prediction output"));
        }
        let x = unsafe { features(x, len) }?;
        let p = lib(learner.inner.predict(x))?;
        // SAFETY: checked non-null above.
        unsafe { *pred = p };
        Ok(())
    })
}

/// Writes the running metrics to `*out`.
///
/// # Safety
/// `handle` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_learner_metrics(handle: *const FfLearner, out: *mut FfMetrics) -> FfStatus {
    guard(|| {
        // SAFETY: caller guarantees the handle is live.
        let learner = unsafe { handle.as_ref() }.ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("metrics output"));
        }
        let m = learner.inner.metrics();
        let metrics = FfMetrics {
            steps: m.total(),
            accuracy: m.accuracy(),
            dp_hard: m.dp_hard().unwrap_or(f64::NAN),
            dp_soft: m.dp_soft().unwrap_or(f64::NAN),
        };
        // SAFETY: checked non-null above.
        unsafe { *out = metrics };
        Ok(())
    })
}

/// Serializes the full learner state as JSON into `*out`; release it with
/// [`ff_string_free`].
///
/// # Safety
/// `handle` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_learner_checkpoint(handle: *const FfLearner, out: *mut *mut c_char) -> FfStatus {
    guard(|| {
        // SAFETY: caller guarantees the handle is live.
        let learner = unsafe { handle.as_ref() }.ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("string output"));
        }
        let json = lib(learner.inner.checkpoint_json())?;
        let c = CString::new(json).map_err(|e| (FfStatus::Serialization, e.to_string()))?;
        // SAFETY: checked non-null above.
        unsafe { *out = c.into_raw() };
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ff_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by `CString::into_raw`.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Releases a learner. Null is ignored.
///
/// # Safety
/// `handle` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ff_learner_free(handle: *mut FfLearner) {
    if !handle.is_null() {
        // SAFETY: produced by `Box::into_raw`.
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ff_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
