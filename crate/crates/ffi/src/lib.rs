//! C ABI for the `mvcp` calibration library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`, `*_load`
//! or `mvcp_calibrate` and released with the matching `*_free`. Every
//! fallible call returns an [`MvcpStatus`]; on failure
//! [`mvcp_last_error_message`] describes the error for the calling thread.
//! Panics never unwind into C; they surface as `MVCP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::c_char;

use mvcp::dataio::{load_model, read_residuals_csv, save_model, ModelRecord};
use mvcp::evalharness::{calibrate, empirical_coverage, Calibration, CalibrationSettings, MethodSpec};
use mvcp::relmcp::certified_miscoverage;
use mvcp::remmcp::{mcp_outlier_budget, remmcp_certificate};
use mvcp::scp::scp_outlier_budget;
use mvcp::{CalibratedModel, Certificate, FamilyKind, McpError, Method, ResidualSet};

/// Result of every fallible call. The numeric values match the exit codes of
/// the `mvcp` command-line tool where the two overlap.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvcpStatus {
    Ok = 0,
    InvalidArgument = 1,
    InsufficientData = 2,
    NotCertified = 3,
    Io = 4,
    Numerical = 5,
    NullPointer = 6,
    Panic = 7,
}

/// Residual matrix handle.
pub struct MvcpResiduals(ResidualSet);

/// Calibrated model handle.
pub struct MvcpModel(CalibratedModel);

/// Certificate fields. Absent values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MvcpCertificate {
    pub eps_target: f64,
    pub expected_bound: f64,
    pub beta: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub eps_certified: f64,
    pub assumptions_convex: bool,
    pub adaptive_penalty: bool,
}

impl From<&Certificate> for MvcpCertificate {
    fn from(c: &Certificate) -> Self {
        let (a, b) = c.beta_dist.unwrap_or((f64::NAN, f64::NAN));
        MvcpCertificate {
            eps_target: c.eps_target,
            expected_bound: c.expected_bound.unwrap_or(f64::NAN),
            beta: c.beta,
            beta_a: a,
            beta_b: b,
            eps_certified: c.eps_certified.unwrap_or(f64::NAN),
            assumptions_convex: c.assumptions_convex,
            adaptive_penalty: c.adaptive_penalty,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &McpError) -> MvcpStatus {
    match e {
        McpError::InsufficientData(_) => MvcpStatus::InsufficientData,
        McpError::Io(_)
        | McpError::Parse { .. }
        | McpError::RaggedRows { .. }
        | McpError::SchemaMismatch(_)
        | McpError::EmptyInput(_) => MvcpStatus::Io,
        McpError::InvalidConfig(_)
        | McpError::Domain(_)
        | McpError::UnsupportedDimension(_)
        | McpError::DimensionMismatch { .. } => MvcpStatus::InvalidArgument,
        McpError::Infeasible { .. }
        | McpError::NonFiniteObjective
        | McpError::NoBracket { .. }
        | McpError::SingularShape(_)
        | McpError::NonPsdCovariance
        | McpError::DegenerateTrace { .. } => MvcpStatus::Numerical,
    }
}

struct Fail(MvcpStatus, String);

impl From<McpError> for Fail {
    fn from(e: McpError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MvcpStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `body`, recording any error for [`mvcp_last_error_message`].
fn guard(body: impl FnOnce() -> Result<(), Fail>) -> MvcpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MvcpStatus::Ok
        }
        Ok(Err(Fail(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            MvcpStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MvcpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call into this library.
#[no_mangle]
pub extern "C" fn mvcp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `n_rows * n_y` row-major values into a new residual set.
///
/// # Safety
/// `data` must point to `n_rows * n_y` readable doubles (or may be NULL when
/// `n_rows` is 0); `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvcp_residuals_new(
    data: *const f64,
    n_rows: usize,
    n_y: usize,
    out: *mut *mut MvcpResiduals,
) -> MvcpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let len = n_rows
            .checked_mul(n_y)
            .ok_or_else(|| Fail(MvcpStatus::InvalidArgument, "size overflows".into()))?;
        let values = if len == 0 {
            Vec::new()
        } else if data.is_null() {
            return Err(null("data"));
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        *out = Box::into_raw(Box::new(MvcpResiduals(ResidualSet::new(n_y, values)?)));
        Ok(())
    })
}

/// Reads a residual CSV with a header row.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvcp_residuals_read_csv(path: *const c_char, out: *mut *mut MvcpResiduals) -> MvcpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let set = read_residuals_csv(c_str(path, "path")?)?;
        *out = Box::into_raw(Box::new(MvcpResiduals(set)));
        Ok(())
    })
}

/// # Safety
/// `set` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mvcp_residuals_free(set: *mut MvcpResiduals) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Number of rows, or 0 for NULL.
///
/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvcp_residuals_len(set: *const MvcpResiduals) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// Residual dimension, or 0 for NULL.
///
/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvcp_residuals_dim(set: *const MvcpResiduals) -> usize {
    set.as_ref().map_or(0, |s| s.0.n_y())
}

/// Calibrates a model. `method` is one of `scp1`, `scp-dim`, `scp-split-a`,
/// `scp-split-b`, `remmcp`, `relmcp`; `score` (`sphere`, `interval`,
/// `ellipsoid`, `union:K`, `rbf:N`) is required for the last two and may be
/// NULL otherwise. Split methods use a reserved fraction of 0.25 and 3
/// clusters. Returns `MVCP_STATUS_NOT_CERTIFIED` when relaxation finds no
/// certified solution.
///
/// # Safety
/// `cal` must be a live handle, the strings NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mvcp_calibrate(
    cal: *const MvcpResiduals,
    method: *const c_char,
    score: *const c_char,
    eps: f64,
    beta: f64,
    seed: u64,
    out: *mut *mut MvcpModel,
) -> MvcpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cal = &cal.as_ref().ok_or_else(|| null("cal"))?.0;
        let method: Method = c_str(method, "method")?.parse()?;
        let score: Option<FamilyKind> = if score.is_null() {
            None
        } else {
            Some(c_str(score, "score")?.parse()?)
        };
        let settings = CalibrationSettings {
            spec: MethodSpec { method, score },
            eps,
            beta,
            seed,
            split_fraction: 0.25,
            clusters: 3,
        };
        match calibrate(cal, &settings)? {
            Calibration::Model(model) => {
                *out = Box::into_raw(Box::new(MvcpModel(*model)));
                Ok(())
            }
            Calibration::NotCertified(reason) => Err(Fail(
                MvcpStatus::NotCertified,
                format!("no certified solution: {}", reason.as_str()),
            )),
        }
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mvcp_model_free(model: *mut MvcpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Whether the residual `r` (length `n_y`) lies in the prediction set.
///
/// # Safety
/// `model` must be a live handle, `r` readable for `n_y` doubles, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mvcp_model_contains(
    model: *const MvcpModel,
    r: *const f64,
    n_y: usize,
    out: *mut bool,
) -> MvcpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        if r.is_null() {
            return Err(null("r"));
        }
        let r = std::slice::from_raw_parts(r, n_y);
        *out = model.prediction_set().membership(r)?;
        Ok(())
    })
}

/// Fraction of `test` inside the prediction set.
///
/// # Safety
/// Both handles must be live; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mvcp_model_coverage(
    model: *const MvcpModel,
    test: *const MvcpResiduals,
    out: *mut f64,
) -> MvcpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let test = &test.as_ref().ok_or_else(|| null("test"))?.0;
        *out = empirical_coverage(&model.prediction_set(), test)?;
        Ok(())
    })
}

/// Parameter count of the calibrated set, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvcp_model_n_params(model: *const MvcpModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.q.0.len())
}

/// Copies the calibrated parameters into `out`, which holds `len` doubles.
///
/// # Safety
/// `model` must be a live handle and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mvcp_model_params(model: *const MvcpModel, out: *mut f64, len: usize) -> MvcpStatus {
    guard(|| {
        let q = &model.as_ref().ok_or_else(|| null("model"))?.0.q.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if len < q.len() {
            return Err(Fail(
                MvcpStatus::InvalidArgument,
                format!("buffer holds {len} values, need {}", q.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, q.len()).copy_from_slice(q);
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mvcp_model_certificate(model: *const MvcpModel, out: *mut MvcpCertificate) -> MvcpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = (&model.as_ref().ok_or_else(|| null("model"))?.0.certificate).into();
        Ok(())
    })
}

/// Writes the model as JSON.
///
/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mvcp_model_save(model: *const MvcpModel, path: *const c_char) -> MvcpStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        save_model(&ModelRecord::from(model), c_str(path, "path")?)?;
        Ok(())
    })
}

/// Reads a model JSON file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mvcp_model_load(path: *const c_char, out: *mut *mut MvcpModel) -> MvcpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let model = CalibratedModel::try_from(load_model(c_str(path, "path")?)?)?;
        *out = Box::into_raw(Box::new(MvcpModel(model)));
        Ok(())
    })
}

/// Split conformal outlier budget `floor(eps (n_cal + 1)) - 1`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mvcp_scp_outlier_budget(n_cal: usize, eps: f64, out: *mut usize) -> MvcpStatus {
    guard(|| {
        *out_ref(out, "out")? = scp_outlier_budget(n_cal, eps)?;
        Ok(())
    })
}

/// Removal outlier budget `floor(eps (n_cal + 1) / n_q) - 1`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mvcp_mcp_outlier_budget(n_cal: usize, eps: f64, n_q: usize, out: *mut usize) -> MvcpStatus {
    guard(|| {
        *out_ref(out, "out")? = mcp_outlier_budget(n_cal, eps, n_q)?;
        Ok(())
    })
}

/// Certificate of the removal scheme for given budget and parameter count.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mvcp_remmcp_certificate(
    n_cal: usize,
    n_q: usize,
    rho: usize,
    eps: f64,
    out: *mut MvcpCertificate,
) -> MvcpStatus {
    guard(|| {
        *out_ref(out, "out")? = (&remmcp_certificate(n_cal, n_q, rho, eps)?).into();
        Ok(())
    })
}

/// A-posteriori miscoverage certified with confidence `1 - beta` for a
/// relaxed solution of complexity `d` after `n_eval` penalty evaluations.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mvcp_certified_miscoverage(
    n_cal: usize,
    d: usize,
    beta: f64,
    n_eval: usize,
    out: *mut f64,
) -> MvcpStatus {
    guard(|| {
        *out_ref(out, "out")? = certified_miscoverage(n_cal, d, beta, n_eval)?;
        Ok(())
    })
}
