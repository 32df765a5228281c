//! C ABI surface over the lvqcf library.
//!
//! Conventions:
//! - Models are opaque handles created by the `lvqcf_model_load_*`
//!   functions and released with `lvqcf_model_free`.
//! - Every fallible call returns an `LvqcfStatus`; on anything other than
//!   `OK` a descriptive message is retrievable via `lvqcf_last_error`.
//! - Strings returned through out-parameters are NUL-terminated, allocated
//!   by this library and must be released with `lvqcf_string_free`.
//! - Structured inputs/outputs (solver options, side constraints, results)
//!   travel as JSON documents, matching the formats of the `lvqcf` CLI.
//!
//! The C header is generated into `include/lvqcf.h` at build time.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use lvqcf::baseline::{baseline_explain, BaselineConfig};
use lvqcf::engine::{explain, CfRequest};
use lvqcf::model::LvqModel;
use lvqcf::regularizer::Regularizer;
use lvqcf::UserConstraints;

/// Result codes of every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LvqcfStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A JSON document or file failed to parse or validate.
    ParseError = 3,
    /// Arguments were structurally valid but rejected (dimension mismatch,
    /// unknown label, bad options).
    InvalidArgument = 4,
    /// The request was well-formed but no counterfactual exists; the result
    /// JSON still carries the per-target diagnostics.
    NoSolution = 5,
    /// Unexpected internal failure (caught panic).
    InternalError = 6,
}

/// Opaque model handle.
pub struct LvqcfModel {
    inner: LvqModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn clear_error() {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
}

fn status_for(err: &lvqcf::Error) -> LvqcfStatus {
    match err {
        lvqcf::Error::Parse(_) | lvqcf::Error::InvalidModel(_) => LvqcfStatus::ParseError,
        _ => LvqcfStatus::InvalidArgument,
    }
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s)
        .unwrap_or_else(|_| CString::new("invalid string").unwrap())
        .into_raw()
}

/// Wraps an entry point body with panic containment.
fn guarded(f: impl FnOnce() -> LvqcfStatus) -> LvqcfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            LvqcfStatus::InternalError
        }
    }
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, LvqcfStatus> {
    if ptr.is_null() {
        set_error("NULL string argument");
        return Err(LvqcfStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        LvqcfStatus::InvalidUtf8
    })
}

unsafe fn read_vector(x: *const f64, len: usize) -> Result<DVector<f64>, LvqcfStatus> {
    if x.is_null() {
        set_error("NULL vector argument");
        return Err(LvqcfStatus::NullArgument);
    }
    let slice = std::slice::from_raw_parts(x, len);
    Ok(DVector::from_column_slice(slice))
}

/// Copy of the last error message on this thread (empty string when the
/// last call succeeded). Free with `lvqcf_string_free`.
#[no_mangle]
pub extern "C" fn lvqcf_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| to_c_string(e.borrow().clone()))
}

/// Release a string allocated by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by an `lvqcf_*` function and
/// not yet freed; NULL is accepted and ignored.
#[no_mangle]
pub unsafe extern "C" fn lvqcf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a model from a JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lvqcf_model_load_json(
    json: *const c_char,
    out: *mut *mut LvqcfModel,
) -> LvqcfStatus {
    guarded(|| {
        clear_error();
        if out.is_null() {
            set_error("NULL output pointer");
            return LvqcfStatus::NullArgument;
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match LvqModel::from_json_str(text) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(LvqcfModel { inner: model }));
                LvqcfStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Load a model from a JSON file on disk.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lvqcf_model_load_file(
    path: *const c_char,
    out: *mut *mut LvqcfModel,
) -> LvqcfStatus {
    guarded(|| {
        clear_error();
        if out.is_null() {
            set_error("NULL output pointer");
            return LvqcfStatus::NullArgument;
        }
        let path = match read_str(path) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match LvqModel::load(path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(LvqcfModel { inner: model }));
                LvqcfStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Serialize a model back to its canonical JSON document.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lvqcf_model_to_json(
    model: *const LvqcfModel,
    out: *mut *mut c_char,
) -> LvqcfStatus {
    guarded(|| {
        clear_error();
        if model.is_null() || out.is_null() {
            set_error("NULL argument");
            return LvqcfStatus::NullArgument;
        }
        *out = to_c_string((*model).inner.to_json_string());
        LvqcfStatus::Ok
    })
}

/// Destroy a model handle. NULL is accepted and ignored.
///
/// # Safety
/// `model` must come from a load function and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lvqcf_model_free(model: *mut LvqcfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature-space dimension; 0 for a NULL handle.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn lvqcf_model_dim(model: *const LvqcfModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).inner.dim()
    }
}

/// Number of prototypes; 0 for a NULL handle.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn lvqcf_model_prototype_count(model: *const LvqcfModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).inner.prototypes().len()
    }
}

/// Winner-takes-all prediction for a dense vector of length `len`.
///
/// # Safety
/// `model` must be live, `x` must point to `len` doubles, `out_label` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lvqcf_predict(
    model: *const LvqcfModel,
    x: *const f64,
    len: usize,
    out_label: *mut i64,
) -> LvqcfStatus {
    guarded(|| {
        clear_error();
        if model.is_null() || out_label.is_null() {
            set_error("NULL argument");
            return LvqcfStatus::NullArgument;
        }
        let x = match read_vector(x, len) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match (*model).inner.predict(&x) {
            Ok(label) => {
                *out_label = label;
                LvqcfStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                LvqcfStatus::InvalidArgument
            }
        }
    })
}

/// Squared (generalized) distance between `x` and prototype `prototype`.
///
/// # Safety
/// `model` must be live, `x` must point to `len` doubles, `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lvqcf_distance(
    model: *const LvqcfModel,
    x: *const f64,
    len: usize,
    prototype: usize,
    out: *mut f64,
) -> LvqcfStatus {
    guarded(|| {
        clear_error();
        if model.is_null() || out.is_null() {
            set_error("NULL argument");
            return LvqcfStatus::NullArgument;
        }
        let x = match read_vector(x, len) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match (*model).inner.distance(&x, prototype) {
            Ok(d) => {
                *out = d;
                LvqcfStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                LvqcfStatus::InvalidArgument
            }
        }
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainOptions {
    #[serde(default = "default_regularizer")]
    regularizer: String,
    #[serde(default)]
    alpha: Option<Vec<f64>>,
    #[serde(default)]
    gl2_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default)]
    constraints: Option<UserConstraints>,
    #[serde(default)]
    parallel: bool,
    #[serde(default)]
    baseline: bool,
}

fn default_regularizer() -> String {
    "manhattan".to_string()
}

fn default_epsilon() -> f64 {
    1e-4
}

impl Default for ExplainOptions {
    fn default() -> Self {
        ExplainOptions {
            regularizer: default_regularizer(),
            alpha: None,
            gl2_matrix: None,
            epsilon: default_epsilon(),
            constraints: None,
            parallel: false,
            baseline: false,
        }
    }
}

fn regularizer_from(opts: &ExplainOptions, dim: usize) -> Result<Regularizer, String> {
    match opts.regularizer.as_str() {
        "manhattan" => {
            let alpha = match &opts.alpha {
                Some(a) => DVector::from_column_slice(a),
                None => DVector::from_element(dim, 1.0),
            };
            Ok(Regularizer::WeightedManhattan { alpha })
        }
        "euclidean" => Ok(Regularizer::Euclidean),
        "gl2" => {
            let rows = opts
                .gl2_matrix
                .as_ref()
                .ok_or_else(|| "gl2 regularizer requires \"gl2_matrix\"".to_string())?;
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(format!("gl2_matrix must be {dim}x{dim}"));
            }
            let mut m = DMatrix::zeros(dim, dim);
            for (i, row) in rows.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    m[(i, j)] = *v;
                }
            }
            Ok(Regularizer::GeneralizedL2 { lambda: m })
        }
        other => Err(format!("unknown regularizer \"{other}\"")),
    }
}

/// Compute a counterfactual for `x` toward `target_label`.
///
/// `options_json` may be NULL for defaults; otherwise it is a JSON object
/// with optional fields `regularizer` ("manhattan" | "euclidean" | "gl2"),
/// `alpha`, `gl2_matrix`, `epsilon`, `constraints` (same schema as the CLI
/// constraints file), `parallel` and `baseline`.
///
/// On `OK` and on `NO_SOLUTION`, `out_json` receives the result document
/// `{x_cf, distance, target_prototype, per_target, total_wall_time_ms}`;
/// with `NO_SOLUTION` the point fields are null and only the per-target
/// statuses are populated.
///
/// # Safety
/// `model` must be live, `x` must point to `len` doubles, `out_json` must
/// be a valid pointer, and `options_json` must be NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lvqcf_explain(
    model: *const LvqcfModel,
    x: *const f64,
    len: usize,
    target_label: i64,
    options_json: *const c_char,
    out_json: *mut *mut c_char,
) -> LvqcfStatus {
    guarded(|| {
        clear_error();
        if model.is_null() || out_json.is_null() {
            set_error("NULL argument");
            return LvqcfStatus::NullArgument;
        }
        *out_json = ptr::null_mut();
        let x = match read_vector(x, len) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let opts: ExplainOptions = if options_json.is_null() {
            ExplainOptions::default()
        } else {
            let text = match read_str(options_json) {
                Ok(t) => t,
                Err(s) => return s,
            };
            match serde_json::from_str(text) {
                Ok(o) => o,
                Err(e) => {
                    set_error(format!("options: {e}"));
                    return LvqcfStatus::ParseError;
                }
            }
        };
        let inner = &(*model).inner;
        let regularizer = match regularizer_from(&opts, inner.dim()) {
            Ok(r) => r,
            Err(msg) => {
                set_error(msg);
                return LvqcfStatus::InvalidArgument;
            }
        };

        let result = if opts.baseline {
            baseline_explain(
                inner,
                &x,
                target_label,
                &regularizer,
                opts.epsilon,
                &BaselineConfig::default(),
            )
        } else {
            let req = CfRequest::new(x, target_label, regularizer)
                .with_epsilon(opts.epsilon)
                .with_constraints(opts.constraints.unwrap_or_default())
                .with_parallel(opts.parallel);
            explain(inner, &req)
        };

        match result {
            Ok(res) => {
                *out_json = to_c_string(res.to_json().to_string());
                if res.is_no_solution() {
                    set_error("no counterfactual exists for this request");
                    LvqcfStatus::NoSolution
                } else {
                    LvqcfStatus::Ok
                }
            }
            Err(e) => {
                set_error(e.to_string());
                status_for(&e)
            }
        }
    })
}
