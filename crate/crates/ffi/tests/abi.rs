use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use xover_ffi::*;

fn standin() -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/tqt_standin.csv");
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(xover_last_error()) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { xover_string_free(p) };
    s
}

fn load() -> *mut XoverDataset {
    let mut ds = ptr::null_mut();
    let placebo = CString::new("F").unwrap();
    let s = unsafe { xover_dataset_load(standin().as_ptr(), placebo.as_ptr(), &mut ds) };
    assert_eq!(s, XoverStatus::Ok, "{}", last_error());
    ds
}

#[test]
fn dataset_shape_and_estimates() {
    let ds = load();
    let (mut n, mut p, mut t) = (0, 0, 0);
    assert_eq!(unsafe { xover_dataset_shape(ds, &mut n, &mut p, &mut t) }, XoverStatus::Ok);
    assert_eq!((n, p, t), (39, 4, 5));

    let cfg = CString::new("abm+unstructured").unwrap();
    let e = CString::new("E").unwrap();
    let mut est = [0.0; 5];
    let mut se = [0.0; 5];
    let (mut lo, mut hi) = ([0.0; 5], [0.0; 5]);
    let mut len = 0;
    let s = unsafe {
        xover_estimate(
            ds,
            cfg.as_ptr(),
            e.as_ptr(),
            0.95,
            est.as_mut_ptr(),
            se.as_mut_ptr(),
            lo.as_mut_ptr(),
            hi.as_mut_ptr(),
            5,
            &mut len,
        )
    };
    assert_eq!(s, XoverStatus::Ok, "{}", last_error());
    assert_eq!(len, 5);
    assert!((est[4] - 8.32).abs() < 0.005, "{}", est[4]);
    for k in 0..5 {
        assert!(se[k] > 0.0 && lo[k] < est[k] && est[k] < hi[k]);
    }

    // too small a buffer reports the needed length
    let s = unsafe {
        xover_estimate(ds, cfg.as_ptr(), e.as_ptr(), 0.95, est.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), 2, &mut len)
    };
    assert_eq!(s, XoverStatus::BufferTooSmall);
    assert_eq!(len, 5);

    let placebo = CString::new("F").unwrap();
    let s = unsafe {
        xover_estimate(ds, cfg.as_ptr(), placebo.as_ptr(), 0.95, est.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), 5, &mut len)
    };
    assert_eq!(s, XoverStatus::InvalidArgument);
    assert!(last_error().contains("placebo"));

    let bad = CString::new("abm+toeplitz").unwrap();
    let s = unsafe {
        xover_estimate(ds, bad.as_ptr(), e.as_ptr(), 0.95, est.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), 5, &mut len)
    };
    assert_ne!(s, XoverStatus::Ok);
    assert!(!last_error().is_empty());
    unsafe { xover_dataset_free(ds) };
}

#[test]
fn analysis_and_verification() {
    let ds = load();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { xover_analyze_json(ds, &mut out) }, XoverStatus::Ok);
    let json: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
    assert!(json["estimates"].as_array().unwrap().len() >= 13 * 3 * 5);

    let (mut gap, mut ids) = (f64::NAN, f64::NAN);
    assert_eq!(unsafe { xover_verify(ds, &mut gap, &mut ids) }, XoverStatus::Ok);
    assert!(gap < 1e-8 && ids < 1e-8, "{gap} {ids}");
    unsafe { xover_dataset_free(ds) };
}

#[test]
fn generator_round_trip_and_simulation() {
    let ds = load();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { xover_generator_fit(ds, &mut g) }, XoverStatus::Ok);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { xover_generator_to_json(g, &mut s) }, XoverStatus::Ok);
    let json = CString::new(take_string(s)).unwrap();
    let mut g2 = ptr::null_mut();
    assert_eq!(unsafe { xover_generator_from_json(json.as_ptr(), &mut g2) }, XoverStatus::Ok);

    let run = |g| {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { xover_simulate_json(g, 5, 11, 1, &mut out) }, XoverStatus::Ok, "{}", last_error());
        take_string(out)
    };
    assert_eq!(run(g), run(g2));

    let junk = CString::new("{\"n\": 3}").unwrap();
    let mut g3 = ptr::null_mut();
    assert_eq!(unsafe { xover_generator_from_json(junk.as_ptr(), &mut g3) }, XoverStatus::Parse);
    assert!(g3.is_null());
    unsafe {
        xover_generator_free(g);
        xover_generator_free(g2);
        xover_dataset_free(ds);
    }
}

#[test]
fn load_errors() {
    let mut ds = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.csv").unwrap();
    let placebo = CString::new("F").unwrap();
    assert_eq!(unsafe { xover_dataset_load(missing.as_ptr(), placebo.as_ptr(), &mut ds) }, XoverStatus::Io);
    let other = CString::new("Q").unwrap();
    assert_eq!(unsafe { xover_dataset_load(standin().as_ptr(), other.as_ptr(), &mut ds) }, XoverStatus::Validation);
    assert!(ds.is_null());
    let v = unsafe { CStr::from_ptr(xover_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

/// Compiles a C client against the generated header and the shared library.
#[test]
fn c_client_links_and_runs() {
    let lib = target_dir();
    if !lib.join("libxover_ffi.so").exists() {
        panic!("shared library not found in {}", lib.display());
    }
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "xover.h"
int main(int argc, char **argv) {
    XoverDataset *ds = NULL;
    if (xover_dataset_load(argv[1], "F", &ds) != XOVER_STATUS_OK) {
        fprintf(stderr, "%s\n", xover_last_error());
        return 1;
    }
    double est[5];
    size_t len = 0;
    XoverStatus s = xover_estimate(ds, "mu1", "E", 0.95, est, NULL, NULL, NULL, 5, &len);
    if (s != XOVER_STATUS_OK) return 2;
    printf("%zu %.6f\n", len, est[4]);
    xover_dataset_free(ds);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("client");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg(format!("-I{}", include.display()))
        .arg(format!("-L{}", lib.display()))
        .arg(format!("-Wl,-rpath,{}", lib.display()))
        .arg("-lxover_ffi")
        .status()
        .unwrap_or_else(|e| panic!("cannot run {cc}: {e}"));
    assert!(status.success());
    let out = Command::new(&exe).arg(standin().to_str().unwrap()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut it = text.split_whitespace();
    assert_eq!(it.next(), Some("5"));
    let mu1: f64 = it.next().unwrap().parse().unwrap();

    // same number through the Rust API
    let (ds, _) = xover_core::ingest_csv(standin().to_str().unwrap(), &xover_core::CsvSchema::with_placebo("F")).unwrap();
    let direct = xover_core::mu1(&ds, 3, 0.95).unwrap()[4].estimate;
    assert!((mu1 - direct).abs() < 1e-6);
}
