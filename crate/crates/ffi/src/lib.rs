//! C ABI over the tieredal engine.
//!
//! Conventions:
//! - Every fallible function returns a [`TdStatus`]; results come back
//!   through out-pointers that are written only on success.
//! - Datasets and models are opaque handles released with their `_free`
//!   function. Strings returned by the library are released with
//!   [`td_string_free`].
//! - After a failure, [`td_last_error`] returns a message for the calling
//!   thread. The pointer stays valid until the next call on that thread.
//! - Panics never cross the boundary; they surface as `TD_STATUS_PANIC`.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use tieredal::annotate::cost_from_counts;
use tieredal::data::{self, Dataset, PoolState};
use tieredal::kernels;
use tieredal::model::{self, ModelParams, TrainConfig};
use tieredal::orchestrator::{self, ExperimentConfig, ResultsFile};
use tieredal::smi;
use tieredal::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdStatus {
    Ok = 0,
    InvalidArgument = 1,
    Format = 2,
    Validation = 3,
    DegeneratePool = 4,
    NumericalDomain = 5,
    BudgetExhausted = 6,
    InsufficientData = 7,
    UnreachableTarget = 8,
    Io = 9,
    Serialization = 10,
    NullPointer = 11,
    Panic = 12,
}

/// Opaque dataset handle.
pub struct TdDataset {
    inner: Dataset,
}

/// Opaque model handle.
pub struct TdModel {
    inner: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "\\0")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TdStatus {
    match e {
        Error::InvalidArgument(_) => TdStatus::InvalidArgument,
        Error::Format { .. } => TdStatus::Format,
        Error::Validation(_) => TdStatus::Validation,
        Error::DegeneratePool(_) => TdStatus::DegeneratePool,
        Error::NumericalDomain { .. } => TdStatus::NumericalDomain,
        Error::BudgetExhausted { .. } => TdStatus::BudgetExhausted,
        Error::InsufficientData(_) => TdStatus::InsufficientData,
        Error::UnreachableTarget { .. } => TdStatus::UnreachableTarget,
        Error::Io { .. } => TdStatus::Io,
        Error::Serde(_) => TdStatus::Serialization,
    }
}

/// Failure raised inside an entry point before it is mapped to a status.
struct Fail(TdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TdStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(TdStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TdStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            TdStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message describing the last failure on this thread, or an empty string.
#[no_mangle]
pub extern "C" fn td_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn td_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn td_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates Gaussian blobs: `num_classes * per_class` points in `dim`
/// dimensions.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn td_dataset_generate(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    rng_seed: u64,
    out: *mut *mut TdDataset,
) -> TdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = data::generate_blobs(num_classes, per_class, dim, spread, rng_seed)?;
        *out = Box::into_raw(Box::new(TdDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn td_dataset_load(path: *const c_char, out: *mut *mut TdDataset) -> TdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let ds = data::load_dataset(&path)?;
        *out = Box::into_raw(Box::new(TdDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn td_dataset_save(ds: *const TdDataset, path: *const c_char) -> TdStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let path = path_arg(path, "path")?;
        data::save_dataset(&ds.inner, &path)?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn td_dataset_free(ds: *mut TdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Row count, feature dimension and class count of a dataset. Any out
/// pointer may be null.
///
/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn td_dataset_shape(
    ds: *const TdDataset,
    rows: *mut usize,
    dim: *mut usize,
    num_classes: *mut usize,
) -> TdStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.inner;
        if let Some(r) = rows.as_mut() {
            *r = ds.len();
        }
        if let Some(d) = dim.as_mut() {
            *d = ds.dim();
        }
        if let Some(c) = num_classes.as_mut() {
            *c = ds.num_classes();
        }
        Ok(())
    })
}

/// Trains a linear softmax model on every row of `ds` for at most `epochs`
/// epochs.
///
/// # Safety
/// `ds` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn td_model_train(
    ds: *const TdDataset,
    epochs: usize,
    rng_seed: u64,
    out: *mut *mut TdModel,
) -> TdStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.inner;
        let out = out_arg(out, "out")?;
        let labeled: BTreeMap<usize, usize> = ds.labels().iter().copied().enumerate().collect();
        let pool = PoolState::new(labeled, BTreeSet::new(), ds)?;
        let cfg = TrainConfig {
            t_max: epochs,
            rng_seed,
            ..TrainConfig::default()
        };
        let m = model::train(&pool, ds, &cfg)?;
        *out = Box::into_raw(Box::new(TdModel { inner: m }));
        Ok(())
    })
}

/// Loads a model written by an experiment run.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn td_model_load(path: *const c_char, out: *mut *mut TdModel) -> TdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let bytes = std::fs::read(&path).map_err(|e| Fail(TdStatus::Io, format!("{}: {e}", path.display())))?;
        let m = ModelParams::from_bytes(&bytes)?;
        *out = Box::into_raw(Box::new(TdModel { inner: m }));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn td_model_save(m: *const TdModel, path: *const c_char) -> TdStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path, "path")?;
        write_file(&path, &m.inner.to_bytes())
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Fail> {
    std::fs::write(path, bytes).map_err(|e| Fail(TdStatus::Io, format!("{}: {e}", path.display())))
}

/// # Safety
/// `m` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn td_model_free(m: *mut TdModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Class probabilities for every row of `ds`, written row-major into `out`
/// (`rows * num_classes` doubles).
///
/// # Safety
/// Handles must be live; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn td_model_predict_proba(
    m: *const TdModel,
    ds: *const TdDataset,
    out: *mut f64,
    out_len: usize,
) -> TdStatus {
    guard(|| {
        let m = &m.as_ref().ok_or_else(|| null("model"))?.inner;
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.inner;
        let all: Vec<usize> = (0..ds.len()).collect();
        let p = m.predict_proba(&ds.rows_f64(&all))?;
        let need = p.nrows() * p.ncols();
        if out_len < need {
            return Err(invalid(format!("output buffer holds {out_len} values, need {need}")));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (r, row) in p.row_iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                dst[r * p.ncols() + c] = *v;
            }
        }
        Ok(())
    })
}

fn matrix(data: &[f64], rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, Fail> {
    if data.len() != rows * cols {
        return Err(invalid(format!("{what}: expected {} values", rows * cols)));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Log-determinant of a symmetric positive definite `n x n` matrix given
/// row-major.
///
/// # Safety
/// `a` must point to `n * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn td_log_det(a: *const f64, n: usize, out: *mut f64) -> TdStatus {
    guard(|| {
        let a = matrix(slice_arg(a, n * n, "a")?, n, n, "a")?;
        let out = out_arg(out, "out")?;
        *out = kernels::log_det(&a)?;
        Ok(())
    })
}

/// LogDetMI of subset `subset` of the candidate rows against the query rows,
/// using cosine kernels regularized by `lambda`.
///
/// # Safety
/// `candidates` holds `n_candidates * dim` doubles, `query` holds
/// `n_query * dim`, `subset` holds `k` indices; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn td_logdetmi(
    candidates: *const f64,
    n_candidates: usize,
    query: *const f64,
    n_query: usize,
    dim: usize,
    subset: *const usize,
    k: usize,
    lambda: f64,
    out: *mut f64,
) -> TdStatus {
    guard(|| {
        let cand = matrix(
            slice_arg(candidates, n_candidates * dim, "candidates")?,
            n_candidates,
            dim,
            "candidates",
        )?;
        let q = matrix(slice_arg(query, n_query * dim, "query")?, n_query, dim, "query")?;
        let subset = slice_arg(subset, k, "subset")?;
        if let Some(&i) = subset.iter().find(|&&i| i >= n_candidates) {
            return Err(invalid(format!("subset index {i} out of range")));
        }
        let out = out_arg(out, "out")?;
        *out = kernels::logdetmi_of_subset(&cand, &q, subset, lambda)?;
        Ok(())
    })
}

/// Greedy LogDetMI maximization: writes the `k` chosen candidate indices in
/// pick order, and optionally each step's marginal gain.
///
/// # Safety
/// Matrix pointers as in [`td_logdetmi`]; `out_indices` holds `k` entries and
/// `out_gains` is null or holds `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn td_smi_greedy(
    candidates: *const f64,
    n_candidates: usize,
    query: *const f64,
    n_query: usize,
    dim: usize,
    k: usize,
    lambda: f64,
    out_indices: *mut usize,
    out_gains: *mut f64,
) -> TdStatus {
    guard(|| {
        let cand = matrix(
            slice_arg(candidates, n_candidates * dim, "candidates")?,
            n_candidates,
            dim,
            "candidates",
        )?;
        let q = matrix(slice_arg(query, n_query * dim, "query")?, n_query, dim, "query")?;
        if k > 0 && out_indices.is_null() {
            return Err(null("out_indices"));
        }
        let trace = smi::greedy_maximize(&cand, &q, k, lambda)?;
        for (j, (&i, &g)) in trace.selected.iter().zip(&trace.gains).enumerate() {
            *out_indices.add(j) = i;
            if !out_gains.is_null() {
                *out_gains.add(j) = g;
            }
        }
        Ok(())
    })
}

/// `c_v * n_correct + c_a * (n - n_correct)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn td_labeling_cost(n_correct: usize, n: usize, c_a: f64, c_v: f64, out: *mut f64) -> TdStatus {
    guard(|| {
        if n_correct > n {
            return Err(invalid(format!("n_correct {n_correct} exceeds n {n}")));
        }
        let out = out_arg(out, "out")?;
        *out = cost_from_counts(n_correct, n, c_a, c_v);
        Ok(())
    })
}

/// Runs an experiment described by a JSON config (missing fields take their
/// defaults). On success `*out_json` receives a JSON array with one results
/// document per run, to be released with [`td_string_free`]. When `out_dir`
/// is non-null the usual per-run files are written there too.
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `out_dir` null or one,
/// and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn td_run_experiment(
    config_json: *const c_char,
    out_dir: *const c_char,
    out_json: *mut *mut c_char,
) -> TdStatus {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(path_arg(out_dir, "out_dir")?)
        };
        let out = out_arg(out_json, "out_json")?;
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Fail(TdStatus::Serialization, e.to_string()))?;
        let runs = orchestrator::run_experiment(&cfg, dir.as_deref())?;
        let docs: Vec<ResultsFile> = runs
            .into_iter()
            .map(|r| ResultsFile {
                config: cfg.clone(),
                rounds: r.records,
            })
            .collect();
        let json = serde_json::to_string(&docs).map_err(|e| Fail(TdStatus::Serialization, e.to_string()))?;
        *out = CString::new(json).map_err(|e| invalid(e.to_string()))?.into_raw();
        Ok(())
    })
}
