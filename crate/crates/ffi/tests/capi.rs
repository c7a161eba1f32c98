use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;
use std::sync::OnceLock;

use serde_json::Value;

use seqtwin::app::{default_patient, save_bundle, train_pipeline, PipelineConfig, SimulationRequest};
use seqtwin::cohort::{generate_synthetic_cohort, Stage, SyntheticConfig};
use seqtwin::policy::Strategy;
use seqtwin_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    path: CString,
    digest: String,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cohort = generate_synthetic_cohort(2, 200, &SyntheticConfig::logistic_staging()).unwrap();
        let mut cfg = PipelineConfig::desk(3);
        cfg.policy.train.max_epochs = 2;
        cfg.symptom_train.max_epochs = 10;
        cfg.symptom_cohort_size = 200;
        let b = train_pipeline(&cohort, None, "synthetic", &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.bin");
        let digest = save_bundle(&b, &p).unwrap();
        Fixture {
            path: CString::new(p.to_str().unwrap()).unwrap(),
            _dir: dir,
            digest,
        }
    })
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    assert!(!s.is_null());
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    seqtwin_string_free(s);
    out
}

fn last_error() -> Value {
    let p = seqtwin_last_error();
    assert!(!p.is_null());
    serde_json::from_str(unsafe { CStr::from_ptr(p) }.to_str().unwrap()).unwrap()
}

fn load() -> *mut SeqtwinBundle {
    let mut h = ptr::null_mut();
    let s = unsafe { seqtwin_bundle_load(fixture().path.as_ptr(), &mut h) };
    assert_eq!(s, SeqtwinStatus::Ok);
    assert!(seqtwin_last_error().is_null());
    h
}

#[test]
fn load_simulate_free() {
    let h = load();
    unsafe {
        assert_eq!(take(seqtwin_bundle_digest(h)), fixture().digest);
        let mut req = SimulationRequest::new(default_patient(), Stage::Ic, Strategy::Optimal);
        req.seed = Some(9);
        let req = CString::new(serde_json::to_string(&req).unwrap()).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(seqtwin_simulate_json(h, req.as_ptr(), &mut out), SeqtwinStatus::Ok);
        let a: Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(a["decision"], "ic");
        assert_eq!(a["strategy"], "optimal");
        let p = a["policy"]["probability"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));

        let mut out = ptr::null_mut();
        assert_eq!(seqtwin_simulate_json(h, req.as_ptr(), &mut out), SeqtwinStatus::Ok);
        let mut b: Value = serde_json::from_str(&take(out)).unwrap();
        let mut a = a;
        a["timing"] = Value::Null;
        b["timing"] = Value::Null;
        assert_eq!(a, b);
        seqtwin_bundle_free(h);
    }
}

#[test]
fn request_errors_map_to_codes() {
    let h = load();
    unsafe {
        let mut out = ptr::null_mut();
        let bad = CString::new("{\"patient\": 1").unwrap();
        assert_eq!(seqtwin_simulate_json(h, bad.as_ptr(), &mut out), SeqtwinStatus::BadRequest);
        assert!(out.is_null());
        assert_eq!(last_error()["error"], "bad_request");

        let mut req = SimulationRequest::new(default_patient(), Stage::Cc, Strategy::Imitation);
        req.patient.ajcc_stage = 0;
        let req = CString::new(serde_json::to_string(&req).unwrap()).unwrap();
        assert_eq!(seqtwin_simulate_json(h, req.as_ptr(), &mut out), SeqtwinStatus::Validation);
        let e = last_error();
        assert_eq!(e["error"], "validation");
        assert_eq!(e["problems"][0]["column"], "ajcc");

        assert_eq!(
            seqtwin_simulate_json(ptr::null(), req.as_ptr(), &mut out),
            SeqtwinStatus::NullPointer
        );
        assert_eq!(seqtwin_simulate_json(h, ptr::null(), &mut out), SeqtwinStatus::NullPointer);
        assert!(seqtwin_bundle_digest(ptr::null()).is_null());
        seqtwin_bundle_free(h);
        seqtwin_bundle_free(ptr::null_mut());
        seqtwin_string_free(ptr::null_mut());
    }
}

#[test]
fn load_errors_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = ptr::null_mut();
    let missing = CString::new(dir.path().join("nope.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { seqtwin_bundle_load(missing.as_ptr(), &mut h) }, SeqtwinStatus::Io);
    assert!(h.is_null());

    let mut bytes = std::fs::read(fixture().path.to_str().unwrap()).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    let p = dir.path().join("bad.bin");
    std::fs::write(&p, &bytes).unwrap();
    let p = CString::new(p.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { seqtwin_bundle_load(p.as_ptr(), &mut h) }, SeqtwinStatus::BundleCorrupt);
    assert!(last_error()["message"].as_str().unwrap().contains("digest"));
    assert_eq!(unsafe { seqtwin_bundle_load(p.as_ptr(), ptr::null_mut()) }, SeqtwinStatus::NullPointer);
}

#[test]
fn schema_and_version() {
    let schema: Value = serde_json::from_str(&unsafe { take(seqtwin_schema_json()) }).unwrap();
    assert_eq!(schema, seqtwin::app::schema_json());
    let v = unsafe { CStr::from_ptr(seqtwin_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/seqtwin.h")).unwrap();
    for f in [
        "seqtwin_bundle_load",
        "seqtwin_bundle_free",
        "seqtwin_bundle_digest",
        "seqtwin_simulate_json",
        "seqtwin_schema_json",
        "seqtwin_last_error",
        "seqtwin_string_free",
        "seqtwin_version",
        "typedef struct SeqtwinBundle SeqtwinBundle",
        "SEQTWIN_STATUS_VALIDATION = 7",
    ] {
        assert!(h.contains(f), "header is missing {f}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "seqtwin.h"

int main(void) {
    SeqtwinBundle *h = NULL;
    if (seqtwin_bundle_load("/nonexistent/model.bin", &h) != SEQTWIN_STATUS_IO) return 1;
    if (h != NULL || seqtwin_last_error() == NULL) return 2;
    char *schema = seqtwin_schema_json();
    if (schema == NULL || strstr(schema, "\"decisions\"") == NULL) return 3;
    seqtwin_string_free(schema);
    printf("%s\n", seqtwin_version());
    return 0;
}
"#;

/// Compile and run a C client against the header and the shared library.
#[test]
fn c_client_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    // target/<profile>/deps/<test> -> target/<profile>
    let lib_dir: PathBuf = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().into();
    if !lib_dir.join("libseqtwin_ffi.so").exists() {
        eprintln!("shared library not found in {}; skipping", lib_dir.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    let exe = dir.path().join("client");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg(&src)
        .arg("-Wall")
        .arg("-Werror")
        .arg(format!("-I{}", concat!(env!("CARGO_MANIFEST_DIR"), "/include")))
        .arg(format!("-L{}", lib_dir.display()))
        .arg("-lseqtwin_ffi")
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "client exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
