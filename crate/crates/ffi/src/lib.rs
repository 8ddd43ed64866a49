//! C ABI over the selcal core library.
//!
//! Every fallible function returns a [`SelcalStatus`] and writes its result
//! through an out-pointer. On failure, [`selcal_last_error`] returns a
//! message for the calling thread. Calibrators are opaque handles created by
//! [`selcal_calibrator_load`] or [`selcal_calibrator_from_json`] and released
//! with [`selcal_calibrator_free`]. A handle may be scored from several
//! threads at once.
//!
//! Correctness flags are passed as `uint8_t` arrays where any non-zero value
//! means correct.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use selcal::annotation::AnnotationStrategy;
use selcal::calibrator::Calibrator;
use selcal::metrics::{self, ScoredExample};
use selcal::predlog::PredictionRecord;
use selcal::{features, Error};

/// Result code of every fallible call. Values are stable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelcalStatus {
    Ok = 0,
    Io = 1,
    Parse = 2,
    Validation = 3,
    Arity = 4,
    Argument = 5,
    InsufficientExamples = 6,
    NotFitted = 7,
    Diverged = 8,
    Unsupported = 9,
    Serialization = 10,
    NullPointer = 11,
    InvalidUtf8 = 12,
    Panic = 13,
}

/// Annotation strategies, in the same order as the CLI names.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelcalStrategy {
    Classification = 0,
    RegressionA1 = 1,
    RegressionA2 = 2,
}

impl From<SelcalStrategy> for AnnotationStrategy {
    fn from(s: SelcalStrategy) -> Self {
        match s {
            SelcalStrategy::Classification => AnnotationStrategy::Classification,
            SelcalStrategy::RegressionA1 => AnnotationStrategy::RegressionA1,
            SelcalStrategy::RegressionA2 => AnnotationStrategy::RegressionA2,
        }
    }
}

/// Opaque calibrator handle.
pub struct SelcalCalibrator {
    inner: Calibrator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SelcalStatus {
    match e.category() {
        "io" => SelcalStatus::Io,
        "parse" => SelcalStatus::Parse,
        "validation" => SelcalStatus::Validation,
        "arity" => SelcalStatus::Arity,
        "insufficient-examples" => SelcalStatus::InsufficientExamples,
        "not-fitted" => SelcalStatus::NotFitted,
        "diverged" => SelcalStatus::Diverged,
        "unsupported" => SelcalStatus::Unsupported,
        "serialization" => SelcalStatus::Serialization,
        _ => SelcalStatus::Argument,
    }
}

/// Failure inside the shim: a status plus its message.
struct Failure(SelcalStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> SelcalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SelcalStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("panic inside selcal".into());
            SelcalStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SelcalStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SelcalStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` must be null or valid for a write of `T`.
unsafe fn write_out<T>(p: *mut T, value: T, what: &str) -> Outcome {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

/// # Safety
/// `conf` and `correct` must each hold `n` values.
unsafe fn examples_arg(
    conf: *const f64,
    correct: *const u8,
    n: usize,
) -> Result<Vec<ScoredExample>, Failure> {
    let conf = slice_arg(conf, n, "confidences")?;
    let correct = slice_arg(correct, n, "correct")?;
    let flags: Vec<bool> = correct.iter().map(|&c| c != 0).collect();
    Ok(metrics::examples(conf, &flags)?)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn selcal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn selcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a calibrator artifact from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn selcal_calibrator_load(
    path: *const c_char,
    out: *mut *mut SelcalCalibrator,
) -> SelcalStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = Calibrator::load(path)?;
        write_out(
            out,
            Box::into_raw(Box::new(SelcalCalibrator { inner })),
            "out",
        )
    })
}

/// Parses a calibrator artifact from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn selcal_calibrator_from_json(
    json: *const c_char,
    out: *mut *mut SelcalCalibrator,
) -> SelcalStatus {
    guard(|| {
        let inner = Calibrator::from_json(str_arg(json, "json")?)?;
        write_out(
            out,
            Box::into_raw(Box::new(SelcalCalibrator { inner })),
            "out",
        )
    })
}

/// Creates the untrained max-probability baseline for `num_classes` classes.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn selcal_calibrator_maxprob(
    num_classes: usize,
    out: *mut *mut SelcalCalibrator,
) -> SelcalStatus {
    guard(|| {
        let inner = Calibrator::max_prob(num_classes);
        inner.layout.validate()?;
        write_out(
            out,
            Box::into_raw(Box::new(SelcalCalibrator { inner })),
            "out",
        )
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `handle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn selcal_calibrator_free(handle: *mut SelcalCalibrator) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of classes the calibrator expects.
///
/// # Safety
/// `handle` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn selcal_calibrator_num_classes(
    handle: *const SelcalCalibrator,
    out: *mut usize,
) -> SelcalStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        write_out(out, h.inner.num_classes(), "out")
    })
}

/// Confidence in `[0, 1]` for one prediction.
///
/// `probs` holds the `num_classes` class probabilities. The optional aux
/// features (`premise_length`, `hypothesis_length`, `similarity`) are given
/// as `n_aux` parallel key/value arrays; pass `n_aux = 0` for none.
///
/// # Safety
/// Array arguments must hold the stated number of elements; keys must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn selcal_calibrator_score(
    handle: *const SelcalCalibrator,
    probs: *const f64,
    num_classes: usize,
    aux_keys: *const *const c_char,
    aux_values: *const f64,
    n_aux: usize,
    out: *mut f64,
) -> SelcalStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let probs = slice_arg(probs, num_classes, "probs")?.to_vec();
        let keys = slice_arg(aux_keys, n_aux, "aux_keys")?;
        let values = slice_arg(aux_values, n_aux, "aux_values")?;
        let mut record = PredictionRecord::new("ffi", "ffi", probs, 0);
        record.gold = record.predicted;
        for (&k, &v) in keys.iter().zip(values) {
            record = record.with_aux(str_arg(k, "aux key")?, v);
        }
        record.validate(num_classes)?;
        write_out(out, h.inner.score(&record)?, "out")
    })
}

/// Numerically stable softmax of `n` logits into `out`.
///
/// # Safety
/// `logits` and `out` must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn selcal_softmax(
    logits: *const f64,
    n: usize,
    out: *mut f64,
) -> SelcalStatus {
    guard(|| {
        let p = features::softmax(slice_arg(logits, n, "logits")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        slice::from_raw_parts_mut(out, n).copy_from_slice(&p);
        Ok(())
    })
}

/// Calibration target of one prediction under `strategy`.
///
/// # Safety
/// `probs` must hold `num_classes` values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn selcal_annotate(
    strategy: SelcalStrategy,
    probs: *const f64,
    num_classes: usize,
    gold: usize,
    out: *mut f64,
) -> SelcalStatus {
    guard(|| {
        let probs = slice_arg(probs, num_classes, "probs")?.to_vec();
        let mut record = PredictionRecord::new("ffi", "ffi", probs, gold);
        record.validate(num_classes)?;
        write_out(
            out,
            AnnotationStrategy::from(strategy).annotate(&record).value,
            "out",
        )
    })
}

/// Area under the risk-coverage curve: mean of the per-rank risks and the
/// trapezoid variant. Either out-pointer may be null.
///
/// # Safety
/// `conf` and `correct` must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn selcal_auc(
    conf: *const f64,
    correct: *const u8,
    n: usize,
    out_mean: *mut f64,
    out_trapezoid: *mut f64,
) -> SelcalStatus {
    guard(|| {
        let curve = metrics::risk_coverage_curve(&examples_arg(conf, correct, n)?)?;
        if !out_mean.is_null() {
            out_mean.write(curve.auc_mean);
        }
        if !out_trapezoid.is_null() {
            out_trapezoid.write(curve.auc_trapezoid);
        }
        Ok(())
    })
}

/// Coverage and selective accuracy at threshold `th`; an example is answered
/// iff its confidence is strictly above `th`.
///
/// # Safety
/// `conf` and `correct` must each hold `n` values; outputs must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn selcal_coverage_accuracy(
    conf: *const f64,
    correct: *const u8,
    n: usize,
    th: f64,
    out_coverage: *mut f64,
    out_accuracy: *mut f64,
) -> SelcalStatus {
    guard(|| {
        let ca = metrics::coverage_accuracy(&examples_arg(conf, correct, n)?, th);
        write_out(out_coverage, ca.coverage, "out_coverage")?;
        write_out(out_accuracy, ca.accuracy, "out_accuracy")
    })
}

/// Threshold with the largest coverage whose selective accuracy reaches
/// `target`; may be negative infinity (answer everything).
///
/// # Safety
/// `conf` and `correct` must each hold `n` values; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn selcal_select_threshold(
    conf: *const f64,
    correct: *const u8,
    n: usize,
    target: f64,
    out: *mut f64,
) -> SelcalStatus {
    guard(|| {
        let th = metrics::select_threshold(&examples_arg(conf, correct, n)?, target)?;
        write_out(out, th, "out")
    })
}
