//! C ABI over the `pepg` toolkit.
//!
//! Every fallible function returns a [`PepgStatus`]. On failure the thread's
//! last-error message is set and can be read with [`pepg_last_error_message`].
//! Handles are opaque and owned by the caller once returned; release them with
//! the matching `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pepg::envs::{EnvSpec, PerformativeEnv};
use pepg::gradients::{performative_value, theorem2_gradient};
use pepg::policy::PolicyParams;
use pepg::trainers::{run, RunRecord, TrainConfig};
use pepg::verify::{best_provider, run_suite, Suite, SuiteOptions};
use pepg::PepgError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PepgStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A buffer length or index did not match.
    InvalidArgument = 2,
    /// Configuration text failed to parse or validate.
    Config = 3,
    /// A numerical routine failed (non-finite value, singular solve, no convergence).
    Numeric = 4,
    /// File or serialization failure.
    Io = 5,
    /// A Rust panic was caught.
    Panic = 6,
}

/// An environment built from an `EnvSpec` document.
pub struct PepgEnv {
    spec: EnvSpec,
    env: Box<dyn PerformativeEnv>,
}

/// A finished training run.
pub struct PepgRun {
    record: RunRecord,
}

/// One logged iteration; mirrors the CSV columns except `algo`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PepgRow {
    pub iteration: usize,
    pub seed: u64,
    pub mc_return: f64,
    pub exact_value: f64,
    pub stability_l2: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

fn status_of(e: &PepgError) -> PepgStatus {
    match e {
        PepgError::Config { .. } | PepgError::Unsupported(_) => PepgStatus::Config,
        PepgError::Dimension(_) | PepgError::Index(_) => PepgStatus::InvalidArgument,
        PepgError::Io(_) | PepgError::Csv(_) | PepgError::Json(_) => PepgStatus::Io,
        _ => PepgStatus::Numeric,
    }
}

struct Fail(PepgStatus, String);

impl From<PepgError> for Fail {
    fn from(e: PepgError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording failures and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PepgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PepgStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PepgStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(PepgStatus::NullPointer, format!("`{name}` is null"))
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(PepgStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

unsafe fn read_theta(env: &PepgEnv, theta: *const f64, len: usize) -> Result<PolicyParams, Fail> {
    if theta.is_null() {
        return Err(null("theta"));
    }
    let (n, na) = (env.env.n_states(), env.env.n_actions());
    if len != n * na {
        return Err(Fail(PepgStatus::InvalidArgument, format!("theta has {len} entries, expected {}", n * na)));
    }
    Ok(PolicyParams::new(n, na, std::slice::from_raw_parts(theta, len).to_vec())?)
}

/// Message of the last failed call on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pepg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Clears the last-error message.
#[no_mangle]
pub extern "C" fn pepg_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pepg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an environment from a TOML `EnvSpec` document (`type = "expfam" | "gridworld" | "static"`).
///
/// # Safety
/// `spec_toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pepg_env_from_toml(spec_toml: *const c_char, out: *mut *mut PepgEnv) -> PepgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = read_str(spec_toml, "spec_toml")?;
        let spec: EnvSpec = toml::from_str(text).map_err(|e| Fail(PepgStatus::Config, e.to_string()))?;
        let env = spec.build()?;
        *out = Box::into_raw(Box::new(PepgEnv { spec, env }));
        Ok(())
    })
}

/// Releases an environment; null is ignored.
///
/// # Safety
/// `env` must come from [`pepg_env_from_toml`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pepg_env_free(env: *mut PepgEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// Pointers must be valid; `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pepg_env_dims(env: *const PepgEnv, n_states: *mut usize, n_actions: *mut usize) -> PepgStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        if n_states.is_null() || n_actions.is_null() {
            return Err(null("n_states/n_actions"));
        }
        *n_states = env.env.n_states();
        *n_actions = env.env.n_actions();
        Ok(())
    })
}

/// Exact performative value of the softmax policy with logits `theta`
/// (`n_states * n_actions`, row-major), entropy weight `lambda`.
///
/// # Safety
/// `theta` must point to `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pepg_performative_value(
    env: *const PepgEnv,
    theta: *const f64,
    len: usize,
    lambda: f64,
    out: *mut f64,
) -> PepgStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let th = read_theta(env, theta, len)?;
        *out = performative_value(env.env.as_ref(), &th, lambda)?;
        Ok(())
    })
}

/// Exact performative gradient at `theta`, written to `grad` (same length).
///
/// # Safety
/// `theta` and `grad` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pepg_gradient(
    env: *const PepgEnv,
    theta: *const f64,
    len: usize,
    lambda: f64,
    grad: *mut f64,
) -> PepgStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        if grad.is_null() {
            return Err(null("grad"));
        }
        let th = read_theta(env, theta, len)?;
        let g = theorem2_gradient(env.env.as_ref(), &th, lambda, best_provider(env.env.as_ref()))?;
        std::slice::from_raw_parts_mut(grad, len).copy_from_slice(&g);
        Ok(())
    })
}

/// Trains on `env` with a TOML `TrainConfig` document (empty string for defaults).
///
/// # Safety
/// `config_toml` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pepg_train(env: *const PepgEnv, config_toml: *const c_char, out: *mut *mut PepgRun) -> PepgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        let text = read_str(config_toml, "config_toml")?;
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Fail(PepgStatus::Config, e.to_string()))?;
        let record = run(&env.spec, &cfg)?;
        *out = Box::into_raw(Box::new(PepgRun { record }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from [`pepg_train`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pepg_run_free(run: *mut PepgRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of logged iterations; 0 for null.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pepg_run_len(run: *const PepgRun) -> usize {
    run.as_ref().map_or(0, |r| r.record.rows.len())
}

/// 1 if the run stopped early, else 0.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pepg_run_aborted(run: *const PepgRun) -> i32 {
    run.as_ref().map_or(0, |r| r.record.aborted.is_some() as i32)
}

/// # Safety
/// `run` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pepg_run_row(run: *const PepgRun, index: usize, out: *mut PepgRow) -> PepgStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = run.record.rows.get(index).ok_or_else(|| {
            Fail(PepgStatus::InvalidArgument, format!("row {index} out of range ({} rows)", run.record.rows.len()))
        })?;
        *out = PepgRow {
            iteration: r.iteration,
            seed: r.seed,
            mc_return: r.mc_return,
            exact_value: r.exact_value,
            stability_l2: r.stability_l2,
            grad_norm: r.grad_norm,
            wall_ms: r.wall_ms,
        };
        Ok(())
    })
}

/// Copies the final parameters into `out` (capacity `cap`) and stores the
/// full length in `written`. Fails with `InvalidArgument` when `cap` is too small.
///
/// # Safety
/// `out` must point to `cap` doubles (may be null when `cap` is 0); `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pepg_run_final_theta(run: *const PepgRun, out: *mut f64, cap: usize, written: *mut usize) -> PepgStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        if written.is_null() {
            return Err(null("written"));
        }
        let th = &run.record.final_theta;
        *written = th.len();
        if cap < th.len() {
            return Err(Fail(PepgStatus::InvalidArgument, format!("buffer holds {cap}, need {}", th.len())));
        }
        if !th.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            std::slice::from_raw_parts_mut(out, th.len()).copy_from_slice(th);
        }
        Ok(())
    })
}

/// The run as CSV text; release with [`pepg_string_free`].
///
/// # Safety
/// `run` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pepg_run_csv(run: *const PepgRun, out: *mut *mut c_char) -> PepgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let csv = run.record.to_csv_string()?;
        *out = CString::new(csv).map_err(|e| Fail(PepgStatus::Io, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pepg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs a verification suite (`identities`, `inequalities` or `all`) on
/// `instances` generated instances and counts passing and failing checks.
///
/// # Safety
/// `suite` must be NUL-terminated; `passed` and `failed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pepg_verify(
    suite: *const c_char,
    seed: u64,
    instances: usize,
    passed: *mut usize,
    failed: *mut usize,
) -> PepgStatus {
    guard(|| {
        if passed.is_null() || failed.is_null() {
            return Err(null("passed/failed"));
        }
        let suite: Suite = read_str(suite, "suite")?.parse()?;
        let opts = SuiteOptions { seed, instances, ..SuiteOptions::default() };
        let reports = run_suite(suite, &opts)?;
        let ok = reports.iter().filter(|r| r.pass).count();
        *passed = ok;
        *failed = reports.len() - ok;
        Ok(())
    })
}
