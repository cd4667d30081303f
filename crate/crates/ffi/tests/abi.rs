use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use promkit_ffi::*;

const PI: f64 = std::f64::consts::PI;

fn last_error() -> String {
    let p = promkit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Moments with vencs 150, 100, 300 and range 600.
fn moments() -> [f64; 3] {
    [0.0, PI / 150.0, PI / 100.0]
}

fn noiseless(m: &[f64], gains: &[f64], v: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for &ma in m {
        for &g in gains {
            out.push(g * (ma * v + 0.3).cos());
            out.push(g * (ma * v + 0.3).sin());
        }
    }
    out
}

fn new_estimator(name: &str, offset: f64) -> *mut PromkitEstimator {
    let m = moments();
    let name = CString::new(name).unwrap();
    let mut est = ptr::null_mut();
    let st = unsafe { promkit_estimator_new(m.as_ptr(), m.len(), name.as_ptr(), offset, &mut est) };
    assert_eq!(st, PromkitStatus::Ok);
    assert!(!est.is_null());
    est
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(promkit_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn voxel_estimates_are_exact_without_noise() {
    let m = moments();
    let y = noiseless(&m, &[1.0, 0.6], 77.0);
    for name in ["prom", "odv", "nco", "mle"] {
        let est = new_estimator(name, f64::NAN);
        let (mut omega, mut offset) = (0.0, 0.0);
        assert_eq!(
            unsafe { promkit_estimator_range(est, &mut omega, &mut offset) },
            PromkitStatus::Ok
        );
        assert!((omega - 600.0).abs() < 1e-9, "{omega}");
        assert!((offset + 300.0).abs() < 1e-9);
        let mut v = f64::NAN;
        let st = unsafe { promkit_estimate_voxel(est, y.as_ptr(), 3, 2, &mut v) };
        assert_eq!(st, PromkitStatus::Ok, "{name}");
        assert!((v - 77.0).abs() < 0.05, "{name}: {v}");
        unsafe { promkit_estimator_free(est) };
    }
}

#[test]
fn offset_moves_the_output_interval() {
    let m = moments();
    let y = noiseless(&m, &[1.0], -250.0);
    let est = new_estimator("prom", 0.0);
    let mut v = 0.0;
    assert_eq!(
        unsafe { promkit_estimate_voxel(est, y.as_ptr(), 3, 1, &mut v) },
        PromkitStatus::Ok
    );
    assert!((v - 350.0).abs() < 1e-6, "{v}");
    unsafe { promkit_estimator_free(est) };
}

#[test]
fn image_marks_unusable_voxels_with_nan() {
    let m = moments();
    let (ny, nx, nc) = (2usize, 3usize, 2usize);
    let truth = [-120.0, -40.0, 0.0, 55.0, 180.0, 290.0];
    let mut data = vec![0f32; 2 * 3 * nc * ny * nx];
    for (p, &v) in truth.iter().enumerate() {
        for (a, &ma) in m.iter().enumerate() {
            for c in 0..nc {
                let i = ((a * nc + c) * ny * nx + p) * 2;
                let g = if p == 4 { 0.0 } else { 1.0 + c as f64 };
                data[i] = (g * (ma * v).cos()) as f32;
                data[i + 1] = (g * (ma * v).sin()) as f32;
            }
        }
    }
    let est = new_estimator("prom", f64::NAN);
    let mut out = vec![0f32; ny * nx];
    let st = unsafe { promkit_estimate_image(est, data.as_ptr(), 3, nc, ny, nx, out.as_mut_ptr()) };
    assert_eq!(st, PromkitStatus::Ok);
    for (p, (&o, &t)) in out.iter().zip(&truth).enumerate() {
        if p == 4 {
            assert!(o.is_nan());
        } else {
            assert!((o as f64 - t).abs() < 0.05, "{p}: {o} vs {t}");
        }
    }
    unsafe { promkit_estimator_free(est) };
}

#[test]
fn errors_set_status_and_message() {
    let m = moments();
    let mut est = ptr::null_mut();
    let bad = CString::new("fft").unwrap();
    let st = unsafe { promkit_estimator_new(m.as_ptr(), 3, bad.as_ptr(), f64::NAN, &mut est) };
    assert_eq!(st, PromkitStatus::InvalidInput);
    assert!(est.is_null());
    assert!(last_error().contains("fft"), "{}", last_error());

    let name = CString::new("prom").unwrap();
    let st = unsafe { promkit_estimator_new(ptr::null(), 3, name.as_ptr(), f64::NAN, &mut est) };
    assert_eq!(st, PromkitStatus::NullPointer);
    assert!(last_error().contains("gamma_m1"));

    let est = new_estimator("prom", f64::NAN);
    let zeros = [0.0; 12];
    let mut v = 0.0;
    let st = unsafe { promkit_estimate_voxel(est, zeros.as_ptr(), 3, 2, &mut v) };
    assert_eq!(st, PromkitStatus::Estimation);
    let st = unsafe { promkit_estimate_voxel(est, zeros.as_ptr(), 2, 2, &mut v) };
    assert_eq!(st, PromkitStatus::InvalidInput, "{}", last_error());
    let st = unsafe { promkit_estimate_voxel(ptr::null(), zeros.as_ptr(), 3, 2, &mut v) };
    assert_eq!(st, PromkitStatus::NullPointer);
    unsafe { promkit_estimator_free(est) };
    unsafe { promkit_estimator_free(ptr::null_mut()) };
}

#[test]
fn last_error_is_per_thread() {
    let mut out = 0.0;
    let st = unsafe { promkit_unambiguous_range(ptr::null(), 2, &mut out) };
    assert_eq!(st, PromkitStatus::NullPointer);
    let other = std::thread::spawn(|| promkit_last_error().is_null()).join().unwrap();
    assert!(other);
    assert!(last_error().contains("venc"));
}

#[test]
fn unambiguous_range_of_pairwise_vencs() {
    let venc = [150.0, 100.0, 300.0];
    let mut out = 0.0;
    assert_eq!(
        unsafe { promkit_unambiguous_range(venc.as_ptr(), 3, &mut out) },
        PromkitStatus::Ok
    );
    assert!((out - 600.0).abs() < 1e-9);
}

#[test]
fn design_round_trip_and_infeasible() {
    let spec = CString::new(
        r#"{"P": 10, "Q": 10, "s": [5, 10, 5], "eps": [1e-3, 1e-3], "omega_eps": 200,
            "gamma_m_tau": 0.0785, "trials_override": 20000, "seed": 1}"#,
    )
    .unwrap();
    let mut json = ptr::null_mut();
    let st = unsafe { promkit_design(spec.as_ptr(), &mut json) };
    assert_eq!(st, PromkitStatus::Ok, "{}", last_error());
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { promkit_string_free(json) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v.get("moments").is_some(), "{text}");

    let hopeless = CString::new(
        r#"{"P": 5, "Q": 5, "s": [0.5, 1, 0.5], "eps": [1e-4, 1e-4], "omega_eps": 100,
            "gamma_m_tau": 0.0785, "trials_override": 10000}"#,
    )
    .unwrap();
    let st = unsafe { promkit_design(hopeless.as_ptr(), &mut json) };
    assert_eq!(st, PromkitStatus::InfeasibleDesign);
    assert!(json.is_null());
    assert!(last_error().contains("rejected"), "{}", last_error());

    let junk = CString::new("{").unwrap();
    assert_eq!(
        unsafe { promkit_design(junk.as_ptr(), &mut json) },
        PromkitStatus::InvalidInput
    );
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/promkit.h")
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok()
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    for f in [
        "promkit_version",
        "promkit_last_error",
        "promkit_unambiguous_range",
        "promkit_estimator_new",
        "promkit_estimator_free",
        "promkit_estimator_range",
        "promkit_estimate_voxel",
        "promkit_estimate_image",
        "promkit_design",
        "promkit_string_free",
        "PROMKIT_STATUS_INFEASIBLE_DESIGN = 4",
        "typedef struct PromkitEstimator PromkitEstimator",
    ] {
        assert!(h.contains(f), "missing {f}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    if !have_cc() {
        eprintln!("no C compiler, skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "promkit.h"
#include <math.h>
int run(void) {
    const double m[3] = {0.0, 0.02, 0.03};
    PromkitEstimator *est = NULL;
    PromkitStatus st = promkit_estimator_new(m, 3, "prom", NAN, &est);
    if (st != PROMKIT_STATUS_OK) return (int)st;
    double omega, offset;
    st = promkit_estimator_range(est, &omega, &offset);
    promkit_estimator_free(est);
    return st == PROMKIT_STATUS_OK ? 0 : 1;
}
"#,
    )
    .unwrap();
    let inc = header().parent().unwrap().to_path_buf();
    for (lang, std) in [("c", "-std=c99"), ("c++", "-std=c++11")] {
        let out = Command::new("cc")
            .args(["-fsyntax-only", "-Wall", "-Werror", std, "-x", lang, "-I"])
            .arg(&inc)
            .arg(&src)
            .output()
            .unwrap();
        assert!(out.status.success(), "{lang}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

/// `target/<profile>`, the parent of the `deps` directory holding this test.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let lib = profile_dir().join("libpromkit_ffi.so");
    if !have_cc() || !lib.exists() {
        eprintln!("no C compiler or shared library, skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include "promkit.h"
#include <math.h>
#include <stdio.h>
int main(void) {
    const double pi = 3.14159265358979323846;
    const double m[3] = {0.0, pi / 150.0, pi / 100.0};
    double y[6];
    for (int a = 0; a < 3; a++) { y[2 * a] = cos(m[a] * -222.0); y[2 * a + 1] = sin(m[a] * -222.0); }
    PromkitEstimator *est = NULL;
    if (promkit_estimator_new(m, 3, "prom", NAN, &est) != PROMKIT_STATUS_OK) return 10;
    double v = 0.0;
    if (promkit_estimate_voxel(est, y, 3, 1, &v) != PROMKIT_STATUS_OK) return 11;
    promkit_estimator_free(est);
    if (promkit_estimator_new(m, 3, "nope", NAN, &est) != PROMKIT_STATUS_INVALID_INPUT) return 12;
    printf("%.6f|%s\n", v, promkit_last_error());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let libdir = lib.parent().unwrap();
    let out = Command::new("cc")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg("-o")
        .arg(&bin)
        .arg(format!("-L{}", libdir.display()))
        .arg(format!("-Wl,-rpath,{}", libdir.display()))
        .args(["-lpromkit_ffi", "-lm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let text = String::from_utf8(run.stdout).unwrap();
    let (v, msg) = text.trim().split_once('|').unwrap();
    assert!((v.parse::<f64>().unwrap() + 222.0).abs() < 1e-6, "{v}");
    assert!(msg.contains("nope"), "{msg}");
}
