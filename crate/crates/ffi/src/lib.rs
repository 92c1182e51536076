//! C ABI over the fsegrad online engine.
//!
//! Every fallible call returns an [`FsegStatus`]; on failure a message is
//! kept per thread and can be read with [`fseg_last_error_message`].
//! Engines are opaque handles created by [`fseg_engine_new`] and released
//! with [`fseg_engine_free`]. Panics never cross the boundary.
//!
//! Matrices are exchanged row-major as flat `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fsegrad::experiment::{self, ExperimentConfig, ExperimentError};
use fsegrad::{build_cell, Error, LossSpec, OnlineConfig, OnlineEngine, SplitMix64};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    /// The step completed but produced a non-finite value; the engine
    /// should not be stepped further.
    Divergence = 4,
    Io = 5,
    Panic = 6,
}

/// Opaque engine handle.
pub struct FsegEngine {
    inner: OnlineEngine,
    gradient: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> FsegStatus {
    match err {
        Error::ShapeMismatch { .. } | Error::LengthMismatch { .. } => FsegStatus::DimensionMismatch,
        _ => FsegStatus::InvalidArgument,
    }
}

fn fail(status: FsegStatus, msg: impl Into<String>) -> FsegStatus {
    set_error(msg);
    status
}

fn from_core(err: Error) -> FsegStatus {
    fail(status_of(&err), err.to_string())
}

fn guard(f: impl FnOnce() -> FsegStatus) -> FsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(FsegStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, FsegStatus> {
    if p.is_null() {
        return Err(fail(FsegStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FsegStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], FsegStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(FsegStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn copy_out(src: &[f64], out: *mut f64, out_len: usize, what: &str) -> FsegStatus {
    if out_len != src.len() {
        return fail(
            FsegStatus::DimensionMismatch,
            format!("{what} buffer holds {out_len} values, need {}", src.len()),
        );
    }
    if src.is_empty() {
        return FsegStatus::Ok;
    }
    if out.is_null() {
        return fail(FsegStatus::NullPointer, format!("{what} buffer is null"));
    }
    // SAFETY: caller promises `out` has room for `out_len` doubles.
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), out, src.len()) };
    FsegStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or NULL.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fseg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates an engine for the named cell.
///
/// `hidden` lists `n_hidden` hidden widths. `params` may be NULL, in which
/// case parameters are drawn from `seed`; otherwise it must hold
/// `params_len` values matching the cell. The recurrent state starts at
/// zero. With `update_params` nonzero each step applies SGD with rate `eta`
/// on the squared-error loss.
///
/// # Safety
/// Pointer arguments must be NULL or valid for the stated lengths, and
/// `out_engine` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fseg_engine_new(
    cell_name: *const c_char,
    input_dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    output_dim: usize,
    seed: u64,
    params: *const f64,
    params_len: usize,
    eta: f64,
    update_params: bool,
    attenuation: f64,
    out_engine: *mut *mut FsegEngine,
) -> FsegStatus {
    guard(|| {
        if out_engine.is_null() {
            return fail(FsegStatus::NullPointer, "out_engine is null");
        }
        *out_engine = ptr::null_mut();
        let name = match str_arg(cell_name, "cell_name") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let hidden = match slice_arg(hidden, n_hidden, "hidden") {
            Ok(h) => h,
            Err(s) => return s,
        };
        let cell = match build_cell(name, input_dim, hidden, output_dim) {
            Ok(c) => c,
            Err(e) => return from_core(e),
        };
        let p = if params.is_null() {
            cell.init_params(&mut SplitMix64::new(seed ^ experiment::PARAM_STREAM))
        } else {
            slice::from_raw_parts(params, params_len).to_vec()
        };
        let config = OnlineConfig {
            loss: LossSpec::SquaredError,
            eta,
            update_params,
            attenuation,
            record_tape: false,
        };
        let sig = cell.signature().clone();
        match OnlineEngine::new(cell, p, sig.zero_state(), config) {
            Ok(inner) => {
                let engine = FsegEngine {
                    inner,
                    gradient: vec![0.0; sig.output_dim * sig.param_dim],
                };
                *out_engine = Box::into_raw(Box::new(engine));
                FsegStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Releases an engine. NULL is ignored.
///
/// # Safety
/// `engine` must come from [`fseg_engine_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fseg_engine_free(engine: *mut FsegEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// # Safety
/// `engine` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fseg_engine_input_dim(engine: *const FsegEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.inner.cell().signature().input_dim)
}

/// # Safety
/// `engine` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fseg_engine_output_dim(engine: *const FsegEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.inner.cell().signature().output_dim)
}

/// # Safety
/// `engine` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fseg_engine_param_dim(engine: *const FsegEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.inner.cell().signature().param_dim)
}

/// Copies the current parameters into `out` (exactly `param_dim` values).
///
/// # Safety
/// `engine` must be a live handle and `out` writable for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fseg_engine_get_params(
    engine: *const FsegEngine,
    out: *mut f64,
    out_len: usize,
) -> FsegStatus {
    guard(|| match engine.as_ref() {
        None => fail(FsegStatus::NullPointer, "engine is null"),
        Some(e) => copy_out(e.inner.params(), out, out_len, "params"),
    })
}

/// Advances one step on input `x` against `target`.
///
/// Writes the loss to `out_loss` and, when `out_output` is non-NULL, the
/// cell output (`output_dim` values). The gradient `dY_N/dP` of this step is
/// then available from [`fseg_engine_gradient`].
///
/// # Safety
/// `engine` must be a live handle; buffers must be valid for their lengths.
#[no_mangle]
pub unsafe extern "C" fn fseg_engine_step(
    engine: *mut FsegEngine,
    x: *const f64,
    x_len: usize,
    target: *const f64,
    target_len: usize,
    out_loss: *mut f64,
    out_output: *mut f64,
    out_output_len: usize,
) -> FsegStatus {
    guard(|| {
        let Some(e) = engine.as_mut() else {
            return fail(FsegStatus::NullPointer, "engine is null");
        };
        let x = match slice_arg(x, x_len, "x") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let target = match slice_arg(target, target_len, "target") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let outcome = match e.inner.step(x, target) {
            Ok(o) => o,
            Err(err) => return from_core(err),
        };
        e.gradient.copy_from_slice(outcome.gradient.dy_dp.as_slice());
        if let Some(l) = out_loss.as_mut() {
            *l = outcome.loss;
        }
        if !out_output.is_null() {
            let s = copy_out(&outcome.output, out_output, out_output_len, "output");
            if s != FsegStatus::Ok {
                return s;
            }
        }
        match outcome.divergence {
            Some(d) => fail(
                FsegStatus::Divergence,
                format!("diverged at step {}: {}", d.step, d.what),
            ),
            None => FsegStatus::Ok,
        }
    })
}

/// Copies the latest `dY_N/dP` (`output_dim x param_dim`, row-major).
///
/// # Safety
/// `engine` must be a live handle and `out` writable for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fseg_engine_gradient(
    engine: *const FsegEngine,
    out: *mut f64,
    out_len: usize,
) -> FsegStatus {
    guard(|| match engine.as_ref() {
        None => fail(FsegStatus::NullPointer, "engine is null"),
        Some(e) => copy_out(&e.gradient, out, out_len, "gradient"),
    })
}

/// Frobenius norm of the carried sensitivity, or NaN for a NULL handle.
///
/// # Safety
/// `engine` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fseg_engine_delta_norm(engine: *const FsegEngine) -> f64 {
    engine
        .as_ref()
        .map_or(f64::NAN, |e| e.inner.state().frobenius_norm())
}

/// Runs an experiment from `key = value` configuration text (the same
/// format the command-line tool reads) and writes its CSV and JSON files.
///
/// `out_exit_code`, when non-NULL, receives 0 for a completed run or 2 on
/// divergence.
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out_exit_code` NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fseg_run_config(
    config_text: *const c_char,
    out_exit_code: *mut i32,
) -> FsegStatus {
    guard(|| {
        let text = match str_arg(config_text, "config_text") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let result = ExperimentConfig::from_text(text).and_then(|c| experiment::run(&c));
        match result {
            Ok(r) => {
                if let Some(code) = out_exit_code.as_mut() {
                    *code = i32::from(r.exit_code());
                }
                FsegStatus::Ok
            }
            Err(ExperimentError::Engine(e)) => from_core(e),
            Err(e @ ExperimentError::Io { .. }) => fail(FsegStatus::Io, e.to_string()),
            Err(e) => fail(FsegStatus::InvalidArgument, e.to_string()),
        }
    })
}
