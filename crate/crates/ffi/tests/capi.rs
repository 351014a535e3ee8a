use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use mvcp_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn residuals(data: &[f64], n_y: usize) -> *mut MvcpResiduals {
    let mut out = ptr::null_mut();
    let status = unsafe { mvcp_residuals_new(data.as_ptr(), data.len() / n_y, n_y, &mut out) };
    assert_eq!(status, MvcpStatus::Ok);
    out
}

fn last_error() -> String {
    let p = mvcp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn calibrate_and_query_interval_model() {
    let cal = residuals(&[1.0, 0.0, 0.0, 2.0, 0.5, 0.5, -0.2, 0.1], 2);
    let mut model = ptr::null_mut();
    let status = unsafe {
        mvcp_calibrate(cal, cstr("remmcp").as_ptr(), cstr("interval").as_ptr(), 0.5, 0.1, 0, &mut model)
    };
    assert_eq!(status, MvcpStatus::Ok, "{}", last_error());
    assert!(mvcp_last_error_message().is_null());

    let n = unsafe { mvcp_model_n_params(model) };
    let mut q = vec![0.0; n];
    assert_eq!(unsafe { mvcp_model_params(model, q.as_mut_ptr(), n) }, MvcpStatus::Ok);
    assert_eq!(q.len(), 2);

    let mut short = [0.0];
    assert_eq!(unsafe { mvcp_model_params(model, short.as_mut_ptr(), 1) }, MvcpStatus::InvalidArgument);

    let mut inside = false;
    let origin = [0.0, 0.0];
    assert_eq!(unsafe { mvcp_model_contains(model, origin.as_ptr(), 2, &mut inside) }, MvcpStatus::Ok);
    assert!(inside);
    assert_eq!(
        unsafe { mvcp_model_contains(model, origin.as_ptr(), 3, &mut inside) },
        MvcpStatus::InvalidArgument
    );

    let mut coverage = 0.0;
    assert_eq!(unsafe { mvcp_model_coverage(model, cal, &mut coverage) }, MvcpStatus::Ok);
    assert!((0.0..=1.0).contains(&coverage));

    unsafe {
        mvcp_model_free(model);
        mvcp_residuals_free(cal);
    }
}

#[test]
fn save_and_load_preserve_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("m.json").to_str().unwrap());
    let cal = residuals(&[-3.0, -1.0, 0.0, 2.0, 5.0], 1);
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            mvcp_calibrate(cal, cstr("scp1").as_ptr(), ptr::null(), 0.34, 0.1, 0, &mut model),
            MvcpStatus::Ok
        );
        assert_eq!(mvcp_model_save(model, path.as_ptr()), MvcpStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(mvcp_model_load(path.as_ptr(), &mut loaded), MvcpStatus::Ok);
        let (mut a, mut b) = ([0.0], [0.0]);
        mvcp_model_params(model, a.as_mut_ptr(), 1);
        mvcp_model_params(loaded, b.as_mut_ptr(), 1);
        assert_eq!(a[0].to_bits(), b[0].to_bits());

        let mut cert = std::mem::zeroed::<MvcpCertificate>();
        assert_eq!(mvcp_model_certificate(loaded, &mut cert), MvcpStatus::Ok);
        assert_eq!(cert.eps_target, 0.34);
        mvcp_model_free(loaded);
        mvcp_model_free(model);
        mvcp_residuals_free(cal);
    }
}

#[test]
fn error_statuses() {
    let mut out = ptr::null_mut();
    let missing = cstr("/nonexistent/residuals.csv");
    assert_eq!(unsafe { mvcp_residuals_read_csv(missing.as_ptr(), &mut out) }, MvcpStatus::Io);
    assert!(out.is_null());
    assert_eq!(unsafe { mvcp_residuals_read_csv(ptr::null(), &mut out) }, MvcpStatus::NullPointer);

    let cal = residuals(&[0.0; 20], 2);
    let mut model = ptr::null_mut();
    let status = unsafe {
        mvcp_calibrate(cal, cstr("remmcp").as_ptr(), cstr("ellipsoid").as_ptr(), 0.0001, 0.1, 0, &mut model)
    };
    assert_eq!(status, MvcpStatus::InsufficientData);
    assert!(last_error().contains("outlier budget"));

    let status = unsafe { mvcp_calibrate(cal, cstr("remmcp").as_ptr(), ptr::null(), 0.1, 0.1, 0, &mut model) };
    assert_eq!(status, MvcpStatus::InvalidArgument);

    let mut budget = 0;
    assert_eq!(unsafe { mvcp_scp_outlier_budget(2000, 0.05, &mut budget) }, MvcpStatus::Ok);
    assert_eq!(budget, 99);
    assert_eq!(unsafe { mvcp_scp_outlier_budget(2000, 1.5, &mut budget) }, MvcpStatus::InvalidArgument);
    let mut eps = 0.0;
    assert_eq!(unsafe { mvcp_certified_miscoverage(10, 10, 0.1, 1, &mut eps) }, MvcpStatus::InvalidArgument);
    unsafe { mvcp_residuals_free(cal) };
}

#[test]
fn relaxation_reports_not_certified() {
    // 20 samples cannot certify a 1% miscoverage at 99% confidence.
    let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
    let cal = residuals(&data, 1);
    let mut model = ptr::null_mut();
    let status = unsafe {
        mvcp_calibrate(cal, cstr("relmcp").as_ptr(), cstr("sphere").as_ptr(), 0.01, 0.01, 0, &mut model)
    };
    assert_eq!(status, MvcpStatus::NotCertified);
    assert!(model.is_null());
    let mut cert = unsafe { std::mem::zeroed::<MvcpCertificate>() };
    unsafe {
        assert_eq!(mvcp_remmcp_certificate(2000, 3, 32, 0.05, &mut cert), MvcpStatus::Ok);
        assert!((cert.expected_bound - 99.0 / 2001.0).abs() < 1e-15);
        assert_eq!((cert.beta_a, cert.beta_b), (1902.0, 99.0));
        mvcp_residuals_free(cal);
    }
}

#[test]
fn free_accepts_null() {
    unsafe {
        mvcp_model_free(ptr::null_mut());
        mvcp_residuals_free(ptr::null_mut());
        assert_eq!(mvcp_residuals_len(ptr::null()), 0);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mvcp.h")).unwrap();
    for name in [
        "mvcp_last_error_message",
        "mvcp_residuals_new",
        "mvcp_residuals_read_csv",
        "mvcp_residuals_free",
        "mvcp_calibrate",
        "mvcp_model_contains",
        "mvcp_model_coverage",
        "mvcp_model_params",
        "mvcp_model_certificate",
        "mvcp_model_save",
        "mvcp_model_load",
        "mvcp_model_free",
        "mvcp_scp_outlier_budget",
        "mvcp_mcp_outlier_budget",
        "mvcp_remmcp_certificate",
        "mvcp_certified_miscoverage",
        "typedef struct MvcpModel MvcpModel",
        "MVCP_STATUS_NOT_CERTIFIED = 3",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Compiles and runs a C program against the static library and header.
#[test]
fn c_program_links_and_runs() {
    let target_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = target_dir.join("libmvcp_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = tempfile::tempdir().unwrap();
    let bin = exe.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler named cc is on PATH");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
