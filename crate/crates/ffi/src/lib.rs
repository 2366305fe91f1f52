//! C ABI for dyadlab. Objects cross the boundary as opaque handles that the
//! caller releases with the matching `*_free`; every call returns a
//! [`DyadStatus`] and the message of the last failure is kept per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use dyadlab::config::{Experiment, ExperimentSpec};
use dyadlab::constants::{a2_classical, op_norm, SampleFamily};
use dyadlab::lattice::Grid;
use dyadlab::measures::{generate, LatticeMeasure, MeasureSpec};
use dyadlab::verify::{run_suite, SuiteReport};
use dyadlab::DyadError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DyadStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BudgetExceeded = 3,
    UnknownSuite = 4,
    Numeric = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A measure on a dyadic lattice.
pub struct DyadMeasure(LatticeMeasure);

/// An experiment config, validated.
pub struct DyadExperiment(ExperimentSpec);

/// The outcome of one check suite.
pub struct DyadReport(SuiteReport);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &DyadError) -> DyadStatus {
    match e {
        DyadError::BudgetExceeded { .. } => DyadStatus::BudgetExceeded,
        DyadError::UnknownSuite(_) => DyadStatus::UnknownSuite,
        DyadError::Io(_) => DyadStatus::Io,
        DyadError::BadParameter(_) | DyadError::Parse(_) | DyadError::MisalignedCube(_) | DyadError::LevelOverflow { .. } => {
            DyadStatus::InvalidArgument
        }
        _ => DyadStatus::Numeric,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (DyadStatus, String)>) -> DyadStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DyadStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside dyadlab".into());
            DyadStatus::Panic
        }
    }
}

fn lib_err(e: DyadError) -> (DyadStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DyadStatus, String) {
    (DyadStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (DyadStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (DyadStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DyadStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copies `s` plus a NUL into `buf`. `needed` (if non-null) receives the full size.
unsafe fn copy_out(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), (DyadStatus, String)> {
    let bytes = s.as_bytes();
    if !needed.is_null() {
        *needed = bytes.len() + 1;
    }
    if buf.is_null() || len < bytes.len() + 1 {
        return Err((DyadStatus::BufferTooSmall, format!("need {} bytes", bytes.len() + 1)));
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread, NUL-terminated.
///
/// # Safety
/// `buf` must be valid for `len` bytes and `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn dyad_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> DyadStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_out(&msg, buf, len, needed) {
        Ok(()) => DyadStatus::Ok,
        Err((s, _)) => s,
    }
}

/// Builds a measure of the given family (e.g. `power:0.5`) on the unit root
/// cube of dimension `n` and depth `depth`.
///
/// # Safety
/// `family` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dyad_measure_generate(family: *const c_char, n: usize, depth: u32, out: *mut *mut DyadMeasure) -> DyadStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = MeasureSpec::parse(str_arg(family, "family")?).map_err(lib_err)?;
        let grid = Grid::unit(n, depth).map_err(lib_err)?;
        let mu = generate(&spec, &grid).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DyadMeasure(mu)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dyad_measure_free(m: *mut DyadMeasure) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of finest cells.
///
/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dyad_measure_cell_count(m: *const DyadMeasure) -> usize {
    m.as_ref().map_or(0, |m| m.0.grid().cell_count())
}

/// Copies the cell masses into `buf`, which must hold `dyad_measure_cell_count` values.
///
/// # Safety
/// `buf` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dyad_measure_masses(m: *const DyadMeasure, buf: *mut f64, len: usize) -> DyadStatus {
    guard(|| {
        let m = handle(m, "measure")?;
        let masses = m.0.masses();
        if buf.is_null() || len < masses.len() {
            return Err((DyadStatus::BufferTooSmall, format!("need {} values", masses.len())));
        }
        std::ptr::copy_nonoverlapping(masses.as_ptr(), buf, masses.len());
        Ok(())
    })
}

/// Classical fractional A₂ over every cube down to `max_level`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dyad_a2(sigma: *const DyadMeasure, omega: *const DyadMeasure, alpha: f64, max_level: u32, out: *mut f64) -> DyadStatus {
    guard(|| {
        let (s, w) = (handle(sigma, "sigma")?, handle(omega, "omega")?);
        if out.is_null() {
            return Err(null("out"));
        }
        if s.0.grid() != w.0.grid() {
            return Err((DyadStatus::InvalidArgument, "measures live on different lattices".into()));
        }
        let fam = SampleFamily::exhaustive(s.0.grid(), max_level.min(s.0.grid().depth()), 0, 0);
        *out = a2_classical(&s.0, &w.0, alpha, &fam.cubes, 0).value;
        Ok(())
    })
}

/// Parses a TOML experiment config; a null `toml` gives the defaults.
///
/// # Safety
/// `toml` must be null or NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dyad_experiment_new(toml: *const c_char, out: *mut *mut DyadExperiment) -> DyadStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = if toml.is_null() {
            ExperimentSpec::default()
        } else {
            ExperimentSpec::from_toml(str_arg(toml, "toml")?).map_err(lib_err)?
        };
        *out = Box::into_raw(Box::new(DyadExperiment(spec)));
        Ok(())
    })
}

/// # Safety
/// `e` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dyad_experiment_free(e: *mut DyadExperiment) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Operator norm of the discretized operator of an experiment, `L²(σ) → L²(ω)`.
///
/// # Safety
/// `e` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dyad_experiment_norm(e: *const DyadExperiment, out: *mut f64) -> DyadStatus {
    guard(|| {
        let e = handle(e, "experiment")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ex = Experiment::new(&e.0).map_err(lib_err)?;
        let op = ex.operator().map_err(lib_err)?;
        *out = op_norm(&op, &ex.omega, e.0.seed).report.value;
        Ok(())
    })
}

/// Runs one suite (`t1`, `goodlambda`, `truncation`, `polytesting`,
/// `cancellation`, `wavelets` or `corona`).
///
/// # Safety
/// `e` must be live, `suite` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dyad_experiment_verify(e: *const DyadExperiment, suite: *const c_char, out: *mut *mut DyadReport) -> DyadStatus {
    guard(|| {
        let e = handle(e, "experiment")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rep = run_suite(str_arg(suite, "suite")?, &e.0).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DyadReport(rep)));
        Ok(())
    })
}

/// # Safety
/// `r` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dyad_report_free(r: *mut DyadReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// 1 when every non-vacuous check passed, 0 otherwise or for a null handle.
///
/// # Safety
/// `r` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dyad_report_passed(r: *const DyadReport) -> i32 {
    r.as_ref().map_or(0, |r| r.0.all_pass() as i32)
}

/// # Safety
/// `r` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dyad_report_record_count(r: *const DyadReport) -> usize {
    r.as_ref().map_or(0, |r| r.0.records.len())
}

/// Ratio of record `i`.
///
/// # Safety
/// `r` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dyad_report_ratio(r: *const DyadReport, i: usize, out: *mut f64) -> DyadStatus {
    guard(|| {
        let r = handle(r, "report")?;
        let rec = r.0.records.get(i).ok_or((DyadStatus::InvalidArgument, format!("record {i} out of range")))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = rec.ratio;
        Ok(())
    })
}

/// The report as JSON. Call with a null `buf` to learn the size via `needed`.
///
/// # Safety
/// `buf` must be valid for `len` bytes and `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn dyad_report_json(r: *const DyadReport, buf: *mut c_char, len: usize, needed: *mut usize) -> DyadStatus {
    guard(|| {
        let r = handle(r, "report")?;
        copy_out(&r.0.to_json(), buf, len, needed)
    })
}
