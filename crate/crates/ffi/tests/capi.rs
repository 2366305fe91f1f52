use std::ffi::CString;
use std::ptr;

use dyadlab_ffi::*;

fn last_error() -> String {
    let mut needed = 0usize;
    unsafe { dyad_last_error(ptr::null_mut(), 0, &mut needed) };
    let mut buf = vec![0u8; needed];
    let s = unsafe { dyad_last_error(buf.as_mut_ptr().cast(), buf.len(), ptr::null_mut()) };
    assert_eq!(s, DyadStatus::Ok);
    buf.pop();
    String::from_utf8(buf).unwrap()
}

fn measure(family: &str, n: usize, depth: u32) -> *mut DyadMeasure {
    let f = CString::new(family).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dyad_measure_generate(f.as_ptr(), n, depth, &mut m) }, DyadStatus::Ok);
    m
}

#[test]
fn lebesgue_masses_and_a2() {
    let m = measure("lebesgue", 1, 6);
    assert_eq!(unsafe { dyad_measure_cell_count(m) }, 64);
    let mut buf = vec![0.0; 64];
    assert_eq!(unsafe { dyad_measure_masses(m, buf.as_mut_ptr(), 64) }, DyadStatus::Ok);
    assert!(buf.iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));
    let mut a2 = 0.0;
    assert_eq!(unsafe { dyad_a2(m, m, 0.0, 4, &mut a2) }, DyadStatus::Ok);
    assert!((a2 - 1.0).abs() < 1e-12);
    unsafe { dyad_measure_free(m) };
}

#[test]
fn error_codes() {
    let bad = CString::new("nonsense").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dyad_measure_generate(bad.as_ptr(), 1, 4, &mut m) }, DyadStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(last_error().contains("nonsense"));
    assert_eq!(unsafe { dyad_measure_generate(ptr::null(), 1, 4, &mut m) }, DyadStatus::NullPointer);

    let small = measure("lebesgue", 1, 4);
    let mut short = vec![0.0; 3];
    assert_eq!(unsafe { dyad_measure_masses(small, short.as_mut_ptr(), 3) }, DyadStatus::BufferTooSmall);
    let other = measure("lebesgue", 1, 5);
    let mut a2 = 0.0;
    assert_eq!(unsafe { dyad_a2(small, other, 0.0, 2, &mut a2) }, DyadStatus::InvalidArgument);
    unsafe {
        dyad_measure_free(small);
        dyad_measure_free(other);
        dyad_measure_free(ptr::null_mut());
    }
}

#[test]
fn verify_through_handles() {
    let cfg = CString::new("seed = 3\n[lattice]\ndepth = 6\n").unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { dyad_experiment_new(cfg.as_ptr(), &mut e) }, DyadStatus::Ok);

    let mut norm = 0.0;
    assert_eq!(unsafe { dyad_experiment_norm(e, &mut norm) }, DyadStatus::Ok);
    assert!(norm > 0.0 && norm.is_finite());

    let suite = CString::new("wavelets").unwrap();
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { dyad_experiment_verify(e, suite.as_ptr(), &mut r) }, DyadStatus::Ok);
    assert_eq!(unsafe { dyad_report_passed(r) }, 1);
    assert!(unsafe { dyad_report_record_count(r) } > 0);
    let mut ratio = -1.0;
    assert_eq!(unsafe { dyad_report_ratio(r, 0, &mut ratio) }, DyadStatus::Ok);
    assert!(ratio >= 0.0);
    assert_eq!(unsafe { dyad_report_ratio(r, 10_000, &mut ratio) }, DyadStatus::InvalidArgument);

    let mut needed = 0usize;
    assert_eq!(unsafe { dyad_report_json(r, ptr::null_mut(), 0, &mut needed) }, DyadStatus::BufferTooSmall);
    let mut buf = vec![0u8; needed];
    assert_eq!(unsafe { dyad_report_json(r, buf.as_mut_ptr().cast(), needed, ptr::null_mut()) }, DyadStatus::Ok);
    let text = std::str::from_utf8(&buf[..needed - 1]).unwrap();
    let v: serde_json::Value = serde_json::from_str(text).unwrap();
    assert_eq!(v["suite"], "wavelets");

    let unknown = CString::new("nope").unwrap();
    let mut r2 = ptr::null_mut();
    assert_eq!(unsafe { dyad_experiment_verify(e, unknown.as_ptr(), &mut r2) }, DyadStatus::UnknownSuite);
    unsafe {
        dyad_report_free(r);
        dyad_experiment_free(e);
    }
}

#[test]
fn budget_is_reported() {
    let cfg = CString::new("[lattice]\ndepth = 9\n[operator]\nbudget = 100\n").unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { dyad_experiment_new(cfg.as_ptr(), &mut e) }, DyadStatus::Ok);
    let mut norm = 0.0;
    assert_eq!(unsafe { dyad_experiment_norm(e, &mut norm) }, DyadStatus::BudgetExceeded);
    unsafe { dyad_experiment_free(e) };
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dyadlab.h")).unwrap();
    for name in [
        "dyad_last_error",
        "dyad_measure_generate",
        "dyad_measure_free",
        "dyad_measure_cell_count",
        "dyad_measure_masses",
        "dyad_a2",
        "dyad_experiment_new",
        "dyad_experiment_free",
        "dyad_experiment_norm",
        "dyad_experiment_verify",
        "dyad_report_free",
        "dyad_report_passed",
        "dyad_report_record_count",
        "dyad_report_ratio",
        "dyad_report_json",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct DyadReport DyadReport;"));
}
