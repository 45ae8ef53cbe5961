//! C ABI over `jsce-core`.
//!
//! Configurations and sweep results are opaque heap handles owned by the
//! caller and released with the matching `_free` function. Fallible calls
//! return a [`JsceStatus`]; on failure the message is kept per thread and can
//! be copied out with [`jsce_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use jsce_core::harness::{run_sweep, write_csv, ExperimentConfig, Profile, Scheme, SeedRange, SweepResult, TrialResult};
use jsce_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JsceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Numerical = 5,
    Io = 6,
    OutOfRange = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JsceScheme {
    AsTvbi = 0,
    TpOmp = 1,
    TpSbl = 2,
    SpTvbi = 3,
    Genie = 4,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JsceProfile {
    Desk = 0,
    Paper = 1,
}

/// One Monte-Carlo trial. `nmse_blocks` follows the block order
/// ITS, CTS, ITB, CTB, BNL, INL, BL, IL.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JsceTrial {
    pub seed: u64,
    pub scheme: JsceScheme,
    pub p_t_dbm: f64,
    pub n_p: u64,
    pub overlap: u64,
    pub gamma_o: f64,
    pub failed: bool,
    pub nmse: f64,
    pub nmse_blocks: [f64; 8],
    pub rmse: f64,
    pub rmse_targets: f64,
    pub rmse_scatterers: f64,
    pub rmse_user: f64,
    pub iterations_phase1: u64,
    pub iterations_phase2: u64,
    pub rcg_iterations: u64,
    pub crb_objective: f64,
}

pub struct JsceConfig(ExperimentConfig);

pub struct JsceSweep(SweepResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> JsceStatus {
    match e {
        Error::Config(_) | Error::Toml(_) => JsceStatus::Config,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format(_) => JsceStatus::Io,
        _ => JsceStatus::Numerical,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (JsceStatus, String)>) -> JsceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => JsceStatus::Ok,
        Ok(Err((st, msg))) => {
            set_error(msg);
            st
        }
        Err(_) => {
            set_error("panic inside jsce");
            JsceStatus::Panic
        }
    }
}

fn core<T>(r: jsce_core::Result<T>) -> Result<T, (JsceStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (JsceStatus, String) {
    (JsceStatus::NullPointer, format!("{what} is null"))
}

fn to_scheme(s: JsceScheme) -> Scheme {
    match s {
        JsceScheme::AsTvbi => Scheme::AsTvbi,
        JsceScheme::TpOmp => Scheme::TpOmp,
        JsceScheme::TpSbl => Scheme::TpSbl,
        JsceScheme::SpTvbi => Scheme::SpTvbi,
        JsceScheme::Genie => Scheme::Genie,
    }
}

fn from_scheme(s: Scheme) -> JsceScheme {
    match s {
        Scheme::AsTvbi => JsceScheme::AsTvbi,
        Scheme::TpOmp => JsceScheme::TpOmp,
        Scheme::TpSbl => JsceScheme::TpSbl,
        Scheme::SpTvbi => JsceScheme::SpTvbi,
        Scheme::Genie => JsceScheme::Genie,
    }
}

impl From<&TrialResult> for JsceTrial {
    fn from(r: &TrialResult) -> Self {
        JsceTrial {
            seed: r.seed,
            scheme: from_scheme(r.scheme),
            p_t_dbm: r.p_t_dbm,
            n_p: r.n_p as u64,
            overlap: r.overlap as u64,
            gamma_o: r.gamma_o,
            failed: r.failed,
            nmse: r.nmse,
            nmse_blocks: r.nmse_blocks,
            rmse: r.rmse,
            rmse_targets: r.rmse_targets,
            rmse_scatterers: r.rmse_scatterers,
            rmse_user: r.rmse_user,
            iterations_phase1: r.iterations_phase1 as u64,
            iterations_phase2: r.iterations_phase2 as u64,
            rcg_iterations: r.rcg_iterations as u64,
            crb_objective: r.crb_objective,
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn jsce_version() -> *const c_char {
    static V: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(s) => s,
        Err(_) => panic!("version string"),
    };
    V.as_ptr()
}

/// Copies the last error message of this thread into `buf` (truncated, always
/// NUL-terminated when `len > 0`) and returns the full message length
/// excluding the terminator. Returns 0 when no error is recorded.
///
/// # Safety
/// `buf` must be null or valid for writes of `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn jsce_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// New configuration with the defaults of `profile`. Never returns null.
#[no_mangle]
pub extern "C" fn jsce_config_new(profile: JsceProfile) -> *mut JsceConfig {
    let p = match profile {
        JsceProfile::Desk => Profile::Desk,
        JsceProfile::Paper => Profile::Paper,
    };
    Box::into_raw(Box::new(JsceConfig(ExperimentConfig::for_profile(p))))
}

/// Parses a TOML experiment configuration into `*out`.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn jsce_config_from_toml(text: *const c_char, out: *mut *mut JsceConfig) -> JsceStatus {
    guard(|| {
        if text.is_null() {
            return Err(null("text"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let s = CStr::from_ptr(text).to_str().map_err(|e| (JsceStatus::InvalidUtf8, e.to_string()))?;
        let cfg = core(ExperimentConfig::from_toml(s))?;
        *out = Box::into_raw(Box::new(JsceConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn jsce_config_free(cfg: *mut JsceConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Seeds `start..end` (half open).
///
/// # Safety
/// `cfg` must be a live configuration handle.
#[no_mangle]
pub unsafe extern "C" fn jsce_config_set_seeds(cfg: *mut JsceConfig, start: u64, end: u64) -> JsceStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        if end <= start {
            return Err((JsceStatus::InvalidArgument, format!("empty seed range {start}..{end}")));
        }
        cfg.0.seeds = SeedRange { start, end };
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live configuration handle and `schemes` valid for `n` reads.
#[no_mangle]
pub unsafe extern "C" fn jsce_config_set_schemes(cfg: *mut JsceConfig, schemes: *const JsceScheme, n: usize) -> JsceStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        if schemes.is_null() || n == 0 {
            return Err((JsceStatus::InvalidArgument, "at least one scheme is required".into()));
        }
        cfg.0.schemes = std::slice::from_raw_parts(schemes, n).iter().map(|&s| to_scheme(s)).collect();
        Ok(())
    })
}

/// Transmit powers in dBm.
///
/// # Safety
/// `cfg` must be a live configuration handle and `dbm` valid for `n` reads.
#[no_mangle]
pub unsafe extern "C" fn jsce_config_set_power(cfg: *mut JsceConfig, dbm: *const f64, n: usize) -> JsceStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        if dbm.is_null() || n == 0 {
            return Err((JsceStatus::InvalidArgument, "at least one power level is required".into()));
        }
        cfg.0.power_dbm = std::slice::from_raw_parts(dbm, n).to_vec();
        Ok(())
    })
}

/// Runs every (point, seed, scheme) trial of `cfg`. Individual trial failures
/// are recorded in the result rather than reported here.
///
/// # Safety
/// `cfg` must be a live configuration handle and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn jsce_run_sweep(cfg: *const JsceConfig, out: *mut *mut JsceSweep) -> JsceStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let res = core(run_sweep(&cfg.0))?;
        *out = Box::into_raw(Box::new(JsceSweep(res)));
        Ok(())
    })
}

/// Number of trials, or 0 for a null handle.
///
/// # Safety
/// `sweep` must be null or a live sweep handle.
#[no_mangle]
pub unsafe extern "C" fn jsce_sweep_len(sweep: *const JsceSweep) -> usize {
    sweep.as_ref().map_or(0, |s| s.0.trials.len())
}

/// # Safety
/// `sweep` must be a live sweep handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn jsce_sweep_trial(sweep: *const JsceSweep, index: usize, out: *mut JsceTrial) -> JsceStatus {
    guard(|| {
        let s = sweep.as_ref().ok_or_else(|| null("sweep"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let t = s.0.trials.get(index).ok_or_else(|| (JsceStatus::OutOfRange, format!("trial {index} of {}", s.0.trials.len())))?;
        *out = (&t.result).into();
        Ok(())
    })
}

/// Writes the per-trial CSV (same columns as the CLI's trials.csv).
///
/// # Safety
/// `sweep` must be a live sweep handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn jsce_sweep_write_csv(sweep: *const JsceSweep, path: *const c_char) -> JsceStatus {
    guard(|| {
        let s = sweep.as_ref().ok_or_else(|| null("sweep"))?;
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|e| (JsceStatus::InvalidUtf8, e.to_string()))?;
        let f = File::create(p).map_err(|e| (JsceStatus::Io, format!("{p}: {e}")))?;
        core(write_csv(BufWriter::new(f), &s.0.trials))
    })
}

/// # Safety
/// `sweep` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn jsce_sweep_free(sweep: *mut JsceSweep) {
    if !sweep.is_null() {
        drop(Box::from_raw(sweep));
    }
}
