//! C ABI for the physctl control framework.
//!
//! Conventions: every fallible call returns a [`PhysctlStatus`]; out-values
//! are written through pointers only on `PHYSCTL_OK`. Handles are opaque,
//! created and destroyed exclusively through this interface. The most recent
//! error message for the calling thread is available via
//! [`physctl_last_error`].

use physctl::control::{pearson2d, run_control_loop, LoopStatus};
use physctl::error::Error;
use physctl::gradcheck::standard_suite;
use physctl::io::RunConfig;
use physctl::tensor::Tensor;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

/// Result codes for every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhysctlStatus {
    /// Success.
    PhysctlOk = 0,
    /// A pointer argument was null.
    PhysctlNullPointer = 1,
    /// A string argument was not valid UTF-8.
    PhysctlInvalidUtf8 = 2,
    /// Invalid argument or internal contract violation.
    PhysctlInvalid = 3,
    /// Tensor shape or dimension mismatch.
    PhysctlShape = 4,
    /// Mathematical domain error (e.g. correlation of a constant image).
    PhysctlDomain = 5,
    /// Malformed file format.
    PhysctlFormat = 6,
    /// Configuration rejected.
    PhysctlConfig = 7,
    /// I/O failure.
    PhysctlIo = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> PhysctlStatus {
    match err {
        Error::ShapeMismatch { .. } | Error::Dimension(_) => PhysctlStatus::PhysctlShape,
        Error::Domain(_) => PhysctlStatus::PhysctlDomain,
        Error::Format(_) => PhysctlStatus::PhysctlFormat,
        Error::Config(_) => PhysctlStatus::PhysctlConfig,
        Error::Io(_) => PhysctlStatus::PhysctlIo,
        Error::NonScalarLoss(_) | Error::Invalid(_) => PhysctlStatus::PhysctlInvalid,
    }
}

fn fail(err: Error) -> PhysctlStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

/// Copy the calling thread's most recent error message into `buf`
/// (NUL-terminated, truncated to `cap` bytes). Returns the full message
/// length in bytes, excluding the terminator. `buf` may be null to query the
/// required capacity.
///
/// # Safety
/// `buf`, when non-null, must point to at least `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn physctl_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Opaque handle around a validated run configuration.
pub struct PhysctlConfig {
    config: RunConfig,
    base_dir: PathBuf,
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, PhysctlStatus> {
    if ptr.is_null() {
        set_error("null pointer argument");
        return Err(PhysctlStatus::PhysctlNullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        PhysctlStatus::PhysctlInvalidUtf8
    })
}

/// Load and validate a TOML run configuration from `path`. On success writes
/// a new handle to `out`; release it with [`physctl_config_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn physctl_config_load(
    path: *const c_char,
    out: *mut *mut PhysctlConfig,
) -> PhysctlStatus {
    if out.is_null() {
        set_error("null out pointer");
        return PhysctlStatus::PhysctlNullPointer;
    }
    let path = match str_arg(path) {
        Ok(s) => PathBuf::from(s),
        Err(code) => return code,
    };
    let config = match RunConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Err(e) = config.validate() {
        return fail(e);
    }
    let base_dir = path.parent().map(PathBuf::from).unwrap_or_default();
    *out = Box::into_raw(Box::new(PhysctlConfig { config, base_dir }));
    PhysctlStatus::PhysctlOk
}

/// Parse and validate a TOML run configuration from an in-memory string.
/// Relative target paths resolve against the current working directory.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn physctl_config_parse(
    toml: *const c_char,
    out: *mut *mut PhysctlConfig,
) -> PhysctlStatus {
    if out.is_null() {
        set_error("null out pointer");
        return PhysctlStatus::PhysctlNullPointer;
    }
    let text = match str_arg(toml) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let config = match RunConfig::from_str(text) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Err(e) = config.validate() {
        return fail(e);
    }
    *out = Box::into_raw(Box::new(PhysctlConfig {
        config,
        base_dir: PathBuf::from("."),
    }));
    PhysctlStatus::PhysctlOk
}

/// Override the run seed on a loaded configuration.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn physctl_config_set_seed(
    cfg: *mut PhysctlConfig,
    seed: u64,
) -> PhysctlStatus {
    match cfg.as_mut() {
        Some(h) => {
            h.config.seed = seed;
            PhysctlStatus::PhysctlOk
        }
        None => {
            set_error("null config handle");
            PhysctlStatus::PhysctlNullPointer
        }
    }
}

/// Override the outer-iteration budget on a loaded configuration.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn physctl_config_set_max_outer_iters(
    cfg: *mut PhysctlConfig,
    max_outer_iters: usize,
) -> PhysctlStatus {
    match cfg.as_mut() {
        Some(h) => {
            if max_outer_iters == 0 {
                set_error("max_outer_iters must be >= 1");
                return PhysctlStatus::PhysctlConfig;
            }
            h.config.run_loop.max_outer_iters = max_outer_iters;
            PhysctlStatus::PhysctlOk
        }
        None => {
            set_error("null config handle");
            PhysctlStatus::PhysctlNullPointer
        }
    }
}

/// Release a configuration handle. Passing null is a no-op.
///
/// # Safety
/// `cfg` must be null or a live handle from this library; the handle is
/// invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn physctl_config_free(cfg: *mut PhysctlConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Outcome summary of a control-loop run.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PhysctlRunResult {
    /// 1 if the target metric was reached within budget, 0 otherwise.
    pub reached_threshold: u8,
    /// Outer iterations actually executed.
    pub iterations: usize,
    /// Mean Pearson correlation at the last executed iteration.
    pub final_pearson: f64,
    /// Mean sigma distance at the last executed iteration.
    pub final_sigma: f64,
}

/// Execute the full control loop for `cfg` without writing any artifacts.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn physctl_run(
    cfg: *const PhysctlConfig,
    out: *mut PhysctlRunResult,
) -> PhysctlStatus {
    let handle = match cfg.as_ref() {
        Some(h) => h,
        None => {
            set_error("null config handle");
            return PhysctlStatus::PhysctlNullPointer;
        }
    };
    if out.is_null() {
        set_error("null out pointer");
        return PhysctlStatus::PhysctlNullPointer;
    }
    let c = &handle.config;
    let run = || -> physctl::error::Result<PhysctlRunResult> {
        let mut system = c.build_system()?;
        let targets = c.build_targets(&handle.base_dir)?;
        let model = c.build_model()?;
        let actor = c.build_actor()?;
        let mut observer = |_: &physctl::control::ControlLoopState,
                            _: &physctl::control::MetricsRecord|
         -> physctl::error::Result<()> { Ok(()) };
        let outcome = run_control_loop(
            system.as_mut(),
            &targets,
            &c.loop_config(),
            model,
            actor,
            c.seed,
            &mut observer,
        )?;
        let last = outcome.state.history.last();
        Ok(PhysctlRunResult {
            reached_threshold: (outcome.status == LoopStatus::ThresholdReached) as u8,
            iterations: outcome.state.history.len(),
            final_pearson: last.map(|r| r.pearson).unwrap_or(f64::NAN),
            final_sigma: last.map(|r| r.sigma_metric).unwrap_or(f64::NAN),
        })
    };
    match run() {
        Ok(result) => {
            *out = result;
            PhysctlStatus::PhysctlOk
        }
        Err(e) => fail(e),
    }
}

/// Run the finite-difference gradient suite. Writes the number of failing
/// checks to `failures` (0 means every gradient matched).
///
/// # Safety
/// `failures` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn physctl_gradcheck(seed: u64, failures: *mut usize) -> PhysctlStatus {
    if failures.is_null() {
        set_error("null out pointer");
        return PhysctlStatus::PhysctlNullPointer;
    }
    match standard_suite(seed, false) {
        Ok(reports) => {
            *failures = reports.iter().filter(|r| !r.pass).count();
            PhysctlStatus::PhysctlOk
        }
        Err(e) => fail(e),
    }
}

/// Pearson correlation between two equally sized vectors.
///
/// # Safety
/// `a` and `b` must point to `len` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn physctl_pearson2d(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> PhysctlStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        set_error("null pointer argument");
        return PhysctlStatus::PhysctlNullPointer;
    }
    if len == 0 {
        set_error("len must be >= 1");
        return PhysctlStatus::PhysctlInvalid;
    }
    let ta = Tensor::from_vec(std::slice::from_raw_parts(a, len).to_vec());
    let tb = Tensor::from_vec(std::slice::from_raw_parts(b, len).to_vec());
    match pearson2d(&ta, &tb) {
        Ok(p) => {
            *out = p;
            PhysctlStatus::PhysctlOk
        }
        Err(e) => fail(e),
    }
}
