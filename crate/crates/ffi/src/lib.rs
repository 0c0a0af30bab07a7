//! C ABI for `qtorhc`.
//!
//! Two opaque handles: [`QtoController`] (a scenario turned into a stateful
//! receding-horizon controller) and [`QtoRun`] (a simulated closed loop).
//! Every fallible call returns a [`QtoStatus`]; the message of the last
//! failure on the calling thread is available through
//! [`qto_last_error_message`]. Matrices are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qtorhc::cli::{load_config, parse_config, run_scenario, synthesize_scenario, ScenarioConfig};
use qtorhc::rhc::{run_closed_loop, Controller, RunHistory, StepRecord};
use qtorhc::Error;

/// Status codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QtoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Synthesis = 4,
    Solver = 5,
    Infeasible = 6,
    Io = 7,
    BufferTooSmall = 8,
    OutOfRange = 9,
    Panic = 10,
}

/// Scalar outcome of one controller step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QtoStepInfo {
    pub t: f64,
    pub value: f64,
    pub horizon: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub in_box: bool,
    pub terminal_level: f64,
}

impl From<&StepRecord> for QtoStepInfo {
    fn from(r: &StepRecord) -> Self {
        Self {
            t: r.t,
            value: r.v,
            horizon: r.t_bar,
            epsilon: r.epsilon,
            rho: r.rho,
            in_box: r.in_b,
            terminal_level: r.terminal_level,
        }
    }
}

pub struct QtoController {
    config: ScenarioConfig,
    inner: Controller,
}

pub struct QtoRun {
    history: RunHistory,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: QtoStatus, msg: impl Into<String>) -> QtoStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> QtoStatus {
    match e {
        Error::Dimension { .. } | Error::InvalidArgument(_) | Error::Interval { .. } => QtoStatus::InvalidArgument,
        Error::Config(_) | Error::Json(_) => QtoStatus::Config,
        Error::Synthesis(_) => QtoStatus::Synthesis,
        Error::Solver(_) | Error::Diverged { .. } => QtoStatus::Solver,
        Error::Infeasible { .. } => QtoStatus::Infeasible,
        Error::Io { .. } => QtoStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), QtoStatus>) -> QtoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QtoStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(QtoStatus::Panic, "panic inside qtorhc"),
    }
}

fn lift<T>(r: qtorhc::Result<T>) -> Result<T, QtoStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, QtoStatus> {
    if p.is_null() {
        return Err(fail(QtoStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(QtoStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], QtoStatus> {
    if p.is_null() {
        return Err(fail(QtoStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(src: &[f64], out: *mut f64, len: usize, what: &str) -> Result<(), QtoStatus> {
    if out.is_null() {
        return Err(fail(QtoStatus::NullPointer, format!("{what} is null")));
    }
    if len < src.len() {
        return Err(fail(QtoStatus::BufferTooSmall, format!("{what} needs {} entries, got {len}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, QtoStatus> {
    p.as_ref().ok_or_else(|| fail(QtoStatus::NullPointer, "handle is null"))
}

unsafe fn handle_mut<'a, T>(p: *mut T) -> Result<&'a mut T, QtoStatus> {
    p.as_mut().ok_or_else(|| fail(QtoStatus::NullPointer, "handle is null"))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qto_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// NUL-terminated) and returns its full length, or 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn qto_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let k = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, k);
            *buf.add(k) = 0;
        }
        bytes.len()
    })
}

fn build_controller(config: ScenarioConfig) -> Result<Box<QtoController>, QtoStatus> {
    let (plant, _) = lift(synthesize_scenario(&config))?;
    let inner = lift(Controller::new(plant, config.rhc_config(), config.mode))?;
    Ok(Box::new(QtoController { config, inner }))
}

unsafe fn store<T>(out: *mut *mut T, value: Box<T>) -> Result<(), QtoStatus> {
    if out.is_null() {
        return Err(fail(QtoStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(value);
    Ok(())
}

/// Builds a controller from scenario JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qto_controller_from_json(json: *const c_char, out: *mut *mut QtoController) -> QtoStatus {
    guard(|| {
        let text = c_str(json, "json")?;
        let c = build_controller(lift(parse_config(text))?)?;
        store(out, c)
    })
}

/// Builds a controller from a scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qto_controller_from_file(path: *const c_char, out: *mut *mut QtoController) -> QtoStatus {
    guard(|| {
        let p = c_str(path, "path")?;
        let c = build_controller(lift(load_config(Path::new(p)))?)?;
        store(out, c)
    })
}

/// # Safety
/// `ctl` must be null or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn qto_controller_free(ctl: *mut QtoController) {
    if !ctl.is_null() {
        drop(Box::from_raw(ctl));
    }
}

/// State and control dimensions.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn qto_controller_dims(ctl: *const QtoController, n: *mut usize, m: *mut usize) -> QtoStatus {
    guard(|| {
        let c = handle(ctl)?;
        if n.is_null() || m.is_null() {
            return Err(fail(QtoStatus::NullPointer, "dimension output is null"));
        }
        *n = c.inner.plant.model.n();
        *m = c.inner.plant.model.m();
        Ok(())
    })
}

/// Writes `K` (`m x n`), `H` (`n x n`) and `α`.
///
/// # Safety
/// `gain` and `h` must hold `gain_len` and `h_len` doubles; `alpha` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn qto_controller_terminal(
    ctl: *const QtoController,
    gain: *mut f64,
    gain_len: usize,
    h: *mut f64,
    h_len: usize,
    alpha: *mut f64,
) -> QtoStatus {
    guard(|| {
        let c = handle(ctl)?;
        let t = &c.inner.plant.terminal;
        write_out(t.gain.transpose().as_slice(), gain, gain_len, "gain")?;
        write_out(t.h.transpose().as_slice(), h, h_len, "H")?;
        if alpha.is_null() {
            return Err(fail(QtoStatus::NullPointer, "alpha is null"));
        }
        *alpha = t.alpha;
        Ok(())
    })
}

/// One sample: takes the measured state `x` (`n` entries), writes the
/// control to hold at the start of the next `δ` into `u` (`m` entries) and
/// the predicted state after `δ` into `x_next` (may be null).
///
/// # Safety
/// Pointers must be valid for the given lengths; `info` may be null.
#[no_mangle]
pub unsafe extern "C" fn qto_controller_step(
    ctl: *mut QtoController,
    x: *const f64,
    n: usize,
    u: *mut f64,
    m: usize,
    x_next: *mut f64,
    info: *mut QtoStepInfo,
) -> QtoStatus {
    guard(|| {
        let c = handle_mut(ctl)?;
        let xs = slice(x, n, "x")?;
        let out = lift(c.inner.step(xs))?;
        let first = out.applied.first().map(|p| p.u.clone()).unwrap_or_else(|| vec![0.0; c.inner.plant.model.m()]);
        write_out(&first, u, m, "u")?;
        if !x_next.is_null() {
            write_out(&out.x_next, x_next, n, "x_next")?;
        }
        if let Some(i) = info.as_mut() {
            *i = QtoStepInfo::from(&out.record);
        }
        Ok(())
    })
}

/// Restores the initial `ε`, `ρ` and sample counter.
///
/// # Safety
/// `ctl` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn qto_controller_reset(ctl: *mut QtoController) -> QtoStatus {
    guard(|| {
        handle_mut(ctl)?.inner.reset();
        Ok(())
    })
}

/// Simulates the closed loop from `x0` (the scenario's own `x0` when null)
/// with the controller's settings. The controller's own state is untouched.
///
/// # Safety
/// `x0` must be null or hold `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qto_controller_simulate(
    ctl: *const QtoController,
    x0: *const f64,
    n: usize,
    out: *mut *mut QtoRun,
) -> QtoStatus {
    guard(|| {
        let c = handle(ctl)?;
        let start = if x0.is_null() { c.config.x0.clone() } else { slice(x0, n, "x0")?.to_vec() };
        let history = lift(run_closed_loop(&c.inner.plant, &start, &c.inner.config, c.inner.mode))?;
        store(out, Box::new(QtoRun { history }))
    })
}

/// # Safety
/// `run` must be null or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn qto_run_free(run: *mut QtoRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of recorded samples, 0 for a null handle.
///
/// # Safety
/// `run` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn qto_run_len(run: *const QtoRun) -> usize {
    run.as_ref().map_or(0, |r| r.history.records.len())
}

/// # Safety
/// `run` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn qto_run_converged(run: *const QtoRun) -> bool {
    run.as_ref().is_some_and(|r| r.history.converged)
}

/// First time after which `‖x‖ ≤ threshold` holds for the rest of the run,
/// negative when the run never settles.
///
/// # Safety
/// `run` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qto_run_settling_time(run: *const QtoRun, threshold: f64, out: *mut f64) -> QtoStatus {
    guard(|| {
        let r = handle(run)?;
        if out.is_null() {
            return Err(fail(QtoStatus::NullPointer, "out is null"));
        }
        *out = r.history.settling_time(threshold).unwrap_or(-1.0);
        Ok(())
    })
}

/// Sample `index`: its scalars into `info` and the measured state into `x`
/// (`n` entries, may be null).
///
/// # Safety
/// `run` must be valid, `info` non-null, `x` null or holding `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn qto_run_sample(
    run: *const QtoRun,
    index: usize,
    info: *mut QtoStepInfo,
    x: *mut f64,
    n: usize,
) -> QtoStatus {
    guard(|| {
        let r = handle(run)?;
        let rec = r
            .history
            .records
            .get(index)
            .ok_or_else(|| fail(QtoStatus::OutOfRange, format!("sample {index} of {}", r.history.records.len())))?;
        let i = info.as_mut().ok_or_else(|| fail(QtoStatus::NullPointer, "info is null"))?;
        *i = QtoStepInfo::from(rec);
        if !x.is_null() {
            write_out(&rec.x, x, n, "x")?;
        }
        Ok(())
    })
}

/// Runs a scenario file end to end, writing its run directory to
/// `out_dir`. `exit_code` receives the command-line exit status (0 clean,
/// 2 not converged, 1 invariant violations).
///
/// # Safety
/// Strings must be NUL-terminated; `exit_code` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qto_run_scenario_file(
    config_path: *const c_char,
    out_dir: *const c_char,
    exit_code: *mut i32,
) -> QtoStatus {
    guard(|| {
        let cfg = lift(load_config(Path::new(c_str(config_path, "config_path")?)))?;
        let out = c_str(out_dir, "out_dir")?;
        if exit_code.is_null() {
            return Err(fail(QtoStatus::NullPointer, "exit_code is null"));
        }
        let outcome = lift(run_scenario(&cfg, Path::new(out)))?;
        *exit_code = outcome.exit_code;
        Ok(())
    })
}
