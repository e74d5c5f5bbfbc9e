//! C ABI over the cotscale engine.
//!
//! Conventions: every fallible function returns a [`CtsStatus`] and writes its
//! result through an out-pointer. On failure a message is kept per thread and
//! read with [`cts_last_error`]. Strings handed out by the library are
//! NUL-terminated UTF-8 and must be released with [`cts_string_free`]; opaque
//! handles have their own `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cotscale::config::EngineConfig;
use cotscale::controller::{run_parallel, run_sequential, BudgetPolicy};
use cotscale::guidance::{nested_cfg, GuidanceConfig, PredictionVector};
use cotscale::protocol::Backends;
use cotscale::trajectory::{canonical_json, deserialize, round_statistics, serialize, Trajectory};
use cotscale::verdict::parse_verdict;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    ParseError = 4,
    ConfigError = 5,
    BackendError = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtsBudgetMode {
    ForceExact = 0,
    MaxRounds = 1,
    EarlyStop = 2,
}

/// A parsed, validated trajectory.
pub struct CtsTrajectory(Trajectory);

/// Configured backends plus the async runtime that drives them.
pub struct CtsEngine {
    runtime: tokio::runtime::Runtime,
    config: EngineConfig,
    backends: Backends,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

type Fallible<T> = Result<T, (CtsStatus, String)>;

fn fail<T>(status: CtsStatus, message: impl ToString) -> Fallible<T> {
    Err((status, message.to_string()))
}

/// Runs `body`, recording any error or panic for [`cts_last_error`].
fn guarded(body: impl FnOnce() -> Fallible<()>) -> CtsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CtsStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CtsStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Fallible<&'a str> {
    if p.is_null() {
        return fail(CtsStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CtsStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Fallible<()> {
    let c = CString::new(s).map_err(|_| (CtsStatus::InvalidInput, "output contains NUL".to_string()))?;
    *out = c.into_raw();
    Ok(())
}

fn check_out<T>(out: *mut T) -> Fallible<()> {
    if out.is_null() {
        return fail(CtsStatus::NullArgument, "out pointer is null");
    }
    Ok(())
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn cts_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cts_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn cts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Text guidance followed by image guidance over `len` elements:
/// `t = text_uncond + s_t * (text_cond - text_uncond)`, then
/// `out = image_uncond + s_i * (t - image_uncond)`.
///
/// # Safety
/// All four arrays must hold `len` doubles; `out` may alias none of them.
#[no_mangle]
pub unsafe extern "C" fn cts_nested_cfg(
    text_cond: *const f64,
    text_uncond: *const f64,
    image_uncond: *const f64,
    len: usize,
    s_t: f64,
    s_i: f64,
    out: *mut f64,
) -> CtsStatus {
    guarded(|| {
        if text_cond.is_null() || text_uncond.is_null() || image_uncond.is_null() || out.is_null() {
            return fail(CtsStatus::NullArgument, "array pointer is null");
        }
        let vec = |p: *const f64| {
            PredictionVector::new(std::slice::from_raw_parts(p, len).to_vec())
                .map_err(|e| (CtsStatus::InvalidInput, e.to_string()))
        };
        let result = nested_cfg(
            &vec(text_cond)?,
            &vec(text_uncond)?,
            &vec(image_uncond)?,
            &GuidanceConfig { s_t, s_i },
        )
        .map_err(|e| (CtsStatus::InvalidInput, e.to_string()))?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(result.as_slice());
        Ok(())
    })
}

/// Parses a reasoner reply into a verdict, returned as canonical JSON.
///
/// # Safety
/// `raw_text` must be a NUL-terminated string; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cts_verdict_parse(raw_text: *const c_char, out_json: *mut *mut c_char) -> CtsStatus {
    guarded(|| {
        check_out(out_json)?;
        let raw = read_str(raw_text, "raw_text")?;
        let verdict = parse_verdict(raw).map_err(|e| (CtsStatus::ParseError, e.to_string()))?;
        write_string(out_json, canonical_json(&verdict))
    })
}

/// Round statistics of a JSONL trajectory dataset, as canonical JSON.
///
/// # Safety
/// `jsonl` must be a NUL-terminated string; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cts_round_statistics(jsonl: *const c_char, out_json: *mut *mut c_char) -> CtsStatus {
    guarded(|| {
        check_out(out_json)?;
        let text = read_str(jsonl, "jsonl")?;
        let dataset = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| deserialize(l).map_err(|e| (CtsStatus::ParseError, format!("line {}: {e}", i + 1))))
            .collect::<Fallible<Vec<Trajectory>>>()?;
        write_string(out_json, canonical_json(&round_statistics(&dataset)))
    })
}

/// Parses and validates one trajectory JSON line.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cts_trajectory_parse(json: *const c_char, out: *mut *mut CtsTrajectory) -> CtsStatus {
    guarded(|| {
        check_out(out)?;
        let text = read_str(json, "json")?;
        let t = deserialize(text).map_err(|e| (CtsStatus::ParseError, e.to_string()))?;
        *out = Box::into_raw(Box::new(CtsTrajectory(t)));
        Ok(())
    })
}

/// # Safety
/// `t` must come from [`cts_trajectory_parse`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cts_trajectory_free(t: *mut CtsTrajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Generated images in the trajectory (backtracks excluded).
///
/// # Safety
/// `t` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cts_trajectory_image_count(t: *const CtsTrajectory, out: *mut usize) -> CtsStatus {
    guarded(|| {
        check_out(out)?;
        let t = t
            .as_ref()
            .ok_or((CtsStatus::NullArgument, "trajectory is null".to_string()))?;
        *out = t.0.image_count();
        Ok(())
    })
}

/// Canonical JSON line of the trajectory.
///
/// # Safety
/// `t` must be a live handle; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cts_trajectory_to_json(t: *const CtsTrajectory, out_json: *mut *mut c_char) -> CtsStatus {
    guarded(|| {
        check_out(out_json)?;
        let t = t
            .as_ref()
            .ok_or((CtsStatus::NullArgument, "trajectory is null".to_string()))?;
        write_string(out_json, serialize(&t.0))
    })
}

/// Builds an engine from config JSON (the same schema as the CLI's config
/// file; relative paths resolve against the working directory).
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cts_engine_new(config_json: *const c_char, out: *mut *mut CtsEngine) -> CtsStatus {
    guarded(|| {
        check_out(out)?;
        let text = read_str(config_json, "config_json")?;
        let config = EngineConfig::from_json(text).map_err(|e| (CtsStatus::ConfigError, e.to_string()))?;
        let backends = config
            .build_backends()
            .map_err(|e| (CtsStatus::ConfigError, e.to_string()))?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .map_err(|e| (CtsStatus::ConfigError, format!("runtime: {e}")))?;
        *out = Box::into_raw(Box::new(CtsEngine {
            runtime,
            config,
            backends,
        }));
        Ok(())
    })
}

/// # Safety
/// `engine` must come from [`cts_engine_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cts_engine_free(engine: *mut CtsEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Runs the sequential controller; writes the trajectory JSON line.
///
/// # Safety
/// `engine` must be a live handle, `prompt` a NUL-terminated string and
/// `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cts_engine_run_sequential(
    engine: *mut CtsEngine,
    prompt: *const c_char,
    budget: u32,
    mode: CtsBudgetMode,
    out_json: *mut *mut c_char,
) -> CtsStatus {
    guarded(|| {
        check_out(out_json)?;
        let engine = engine
            .as_ref()
            .ok_or((CtsStatus::NullArgument, "engine is null".to_string()))?;
        let prompt = read_str(prompt, "prompt")?;
        let policy = match mode {
            CtsBudgetMode::ForceExact => BudgetPolicy::force_exact(budget),
            CtsBudgetMode::MaxRounds => BudgetPolicy::max_rounds(budget),
            CtsBudgetMode::EarlyStop => BudgetPolicy::early_stop(budget),
        };
        let controller = engine.config.controller.clone().with_policy(policy);
        let t = engine
            .runtime
            .block_on(run_sequential(prompt, &controller, &engine.backends))
            .map_err(|e| match e {
                cotscale::controller::RunError::Precondition(_) => (CtsStatus::InvalidInput, e.to_string()),
                _ => (CtsStatus::BackendError, e.to_string()),
            })?;
        write_string(out_json, serialize(&t))
    })
}

/// Runs best-of-`n`; writes the outcome as canonical JSON.
///
/// # Safety
/// `engine` must be a live handle, `prompt` a NUL-terminated string and
/// `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cts_engine_run_parallel(
    engine: *mut CtsEngine,
    prompt: *const c_char,
    n: u32,
    out_json: *mut *mut c_char,
) -> CtsStatus {
    guarded(|| {
        check_out(out_json)?;
        let engine = engine
            .as_ref()
            .ok_or((CtsStatus::NullArgument, "engine is null".to_string()))?;
        let prompt = read_str(prompt, "prompt")?;
        let mut config = engine.config.parallel.clone();
        config.n = n;
        let outcome = engine
            .runtime
            .block_on(run_parallel(prompt, &config, &engine.backends))
            .map_err(|e| match e {
                cotscale::controller::ParallelError::Precondition(_) => (CtsStatus::InvalidInput, e.to_string()),
                _ => (CtsStatus::BackendError, e.to_string()),
            })?;
        write_string(out_json, canonical_json(&outcome))
    })
}
