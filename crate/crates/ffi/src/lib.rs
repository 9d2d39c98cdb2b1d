//! C ABI for `xover-core`.
//!
//! Objects are opaque handles created by `*_load`, `*_fit` or `*_from_json`
//! functions and released by the matching `*_free`. Every fallible function
//! returns an [`XoverStatus`]; on failure the message is available from
//! [`xover_last_error`] on the same thread until the next failing call.
//! Strings returned through `char **` outputs are owned by the caller and
//! must be released with [`xover_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use xover_core::report::{analyze, AnalysisOptions};
use xover_core::{
    fit_generator, ingest_csv, run_configuration, run_study, Configuration, CsvSchema, Error, GeneratorModel,
    SimulationConfig, TrialDataset,
};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XoverStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8 or an argument was out of range.
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    /// The data violate the cross-over rectangle or labelling rules.
    Validation = 5,
    /// A fit or factorization failed.
    Numerical = 6,
    /// An output buffer was too small; the required length was written.
    BufferTooSmall = 7,
    Panic = 8,
}

/// A validated cross-over dataset.
pub struct XoverDataset(TrialDataset);

/// A simulation generator.
pub struct XoverGenerator(GeneratorModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> XoverStatus {
    match e {
        Error::Io { .. } => XoverStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => XoverStatus::Parse,
        Error::Validation(_) | Error::InvalidSubject { .. } | Error::InconsistentTimepoints { .. } => {
            XoverStatus::Validation
        }
        Error::InvalidArgument(_) | Error::PlaceboContrast => XoverStatus::InvalidArgument,
        _ => XoverStatus::Numerical,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (XoverStatus, String)>) -> XoverStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => XoverStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            XoverStatus::Panic
        }
    }
}

type FfiResult<T> = Result<T, (XoverStatus, String)>;

fn core<T>(r: xover_core::Result<T>) -> FfiResult<T> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err((XoverStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (XoverStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| (XoverStatus::NullArgument, format!("{name} is null")))
}

fn check_out<T>(p: *mut T, name: &str) -> FfiResult<()> {
    if p.is_null() {
        Err((XoverStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn into_c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| (XoverStatus::Panic, "output contains a NUL byte".into()))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xover_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn xover_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn xover_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a long-format CSV; incomplete subjects are dropped.
///
/// # Safety
/// `path` and `placebo` must be NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn xover_dataset_load(
    path: *const c_char,
    placebo: *const c_char,
    out: *mut *mut XoverDataset,
) -> XoverStatus {
    guard(|| {
        check_out(out, "out")?;
        let path = str_arg(path, "path")?;
        let placebo = str_arg(placebo, "placebo")?;
        let (ds, _) = core(ingest_csv(path, &CsvSchema::with_placebo(placebo)))?;
        *out = Box::into_raw(Box::new(XoverDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`xover_dataset_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn xover_dataset_free(ds: *mut XoverDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Writes n, P and T. Any output pointer may be null.
///
/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn xover_dataset_shape(
    ds: *const XoverDataset,
    n: *mut usize,
    periods: *mut usize,
    timepoints: *mut usize,
) -> XoverStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.0;
        for (p, v) in [(n, ds.n_subjects()), (periods, ds.n_periods()), (timepoints, ds.n_timepoints())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Estimates of one treatment at every timepoint under one configuration
/// (`"mu1"` or `"<mean>+<cov>"`, e.g. `"abm+unstructured"`).
///
/// Each output array must hold `capacity` values; `*len` receives T. If
/// `capacity < T` nothing else is written and `BufferTooSmall` is returned.
///
/// # Safety
/// `ds` must be a live handle, strings NUL-terminated, and each non-null
/// array writable for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn xover_estimate(
    ds: *const XoverDataset,
    configuration: *const c_char,
    treatment: *const c_char,
    level: f64,
    estimate: *mut f64,
    se: *mut f64,
    ci_lower: *mut f64,
    ci_upper: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> XoverStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.0;
        let c: Configuration = core(str_arg(configuration, "configuration")?.parse())?;
        let label = str_arg(treatment, "treatment")?;
        check_out(len, "len")?;
        let z = match ds.treatment_index(label) {
            Some(0) => return Err((XoverStatus::InvalidArgument, "treatment is the placebo".into())),
            Some(z) => z,
            None => return Err((XoverStatus::InvalidArgument, format!("unknown treatment {label}"))),
        };
        let t = ds.n_timepoints();
        *len = t;
        if capacity < t {
            return Err((XoverStatus::BufferTooSmall, format!("need {t} slots, got {capacity}")));
        }
        let run = core(run_configuration(ds, c, level))?;
        for (k, e) in run.estimates.iter().filter(|e| e.treatment == z).enumerate() {
            for (p, v) in [(estimate, e.estimate), (se, e.se), (ci_lower, e.ci.lower), (ci_upper, e.ci.upper)] {
                if !p.is_null() {
                    *p.add(k) = v;
                }
            }
        }
        Ok(())
    })
}

/// Full analysis (all twelve models and the paired difference, 95% CIs) as
/// a JSON report.
///
/// # Safety
/// `ds` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xover_analyze_json(ds: *const XoverDataset, out: *mut *mut c_char) -> XoverStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.0;
        check_out(out, "out")?;
        let report = core(analyze(ds, &AnalysisOptions::default(), &[]))?;
        *out = into_c_string(core(report.to_json())?)?;
        Ok(())
    })
}

/// Largest relative gap between the G-computation and augmented estimates,
/// and largest residual-identity violation, over the twelve models.
///
/// # Safety
/// `ds` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn xover_verify(
    ds: *const XoverDataset,
    max_gap: *mut f64,
    max_identity: *mut f64,
) -> XoverStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.0;
        let (mut gap, mut ids) = (0.0f64, 0.0f64);
        for c in Configuration::all().into_iter().filter(|c| c.spec().is_some()) {
            let run = core(run_configuration(ds, c, 0.95))?;
            gap = gap.max(run.theorem_gap_relative.unwrap_or(0.0));
            ids = ids.max(run.identities.map_or(0.0, |i| i.max()));
        }
        if !max_gap.is_null() {
            *max_gap = gap;
        }
        if !max_identity.is_null() {
            *max_identity = ids;
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xover_generator_fit(ds: *const XoverDataset, out: *mut *mut XoverGenerator) -> XoverStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.0;
        check_out(out, "out")?;
        let g = core(fit_generator(ds))?;
        *out = Box::into_raw(Box::new(XoverGenerator(g)));
        Ok(())
    })
}

/// # Safety
/// `json` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xover_generator_from_json(json: *const c_char, out: *mut *mut XoverGenerator) -> XoverStatus {
    guard(|| {
        check_out(out, "out")?;
        let g = core(GeneratorModel::from_json(str_arg(json, "json")?))?;
        *out = Box::into_raw(Box::new(XoverGenerator(g)));
        Ok(())
    })
}

/// # Safety
/// `g` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xover_generator_to_json(g: *const XoverGenerator, out: *mut *mut c_char) -> XoverStatus {
    guard(|| {
        let g = &ref_arg(g, "g")?.0;
        check_out(out, "out")?;
        *out = into_c_string(core(g.to_json())?)?;
        Ok(())
    })
}

/// # Safety
/// `g` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn xover_generator_free(g: *mut XoverGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Runs the simulation study over all configurations and returns the report
/// as JSON. `workers` of 0 means one per CPU.
///
/// # Safety
/// `g` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xover_simulate_json(
    g: *const XoverGenerator,
    replicates: usize,
    seed: u64,
    workers: usize,
    out: *mut *mut c_char,
) -> XoverStatus {
    guard(|| {
        let g = &ref_arg(g, "g")?.0;
        check_out(out, "out")?;
        let mut cfg = SimulationConfig::new(replicates, seed);
        cfg.workers = if workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            workers
        };
        let report = core(run_study(g, &cfg))?;
        *out = into_c_string(core(report.to_json())?)?;
        Ok(())
    })
}
