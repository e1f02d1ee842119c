use std::ffi::{CStr, CString};
use std::ptr;

use serde_json::Value;

use tieredal_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(td_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn dataset_roundtrip_and_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("ds.bin"));
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(td_dataset_generate(3, 10, 2, 1.0, 4, &mut ds), TdStatus::Ok);
        let (mut rows, mut dim, mut c) = (0, 0, 0);
        assert_eq!(td_dataset_shape(ds, &mut rows, &mut dim, &mut c), TdStatus::Ok);
        assert_eq!((rows, dim, c), (30, 2, 3));
        assert_eq!(td_dataset_save(ds, path.as_ptr()), TdStatus::Ok);

        let mut loaded = ptr::null_mut();
        assert_eq!(td_dataset_load(path.as_ptr(), &mut loaded), TdStatus::Ok);
        assert_eq!(td_dataset_shape(loaded, &mut rows, &mut dim, &mut c), TdStatus::Ok);
        assert_eq!((rows, dim, c), (30, 2, 3));

        let mut m = ptr::null_mut();
        assert_eq!(td_model_train(loaded, 20, 1, &mut m), TdStatus::Ok);
        let mut probs = vec![0.0; 90];
        assert_eq!(
            td_model_predict_proba(m, loaded, probs.as_mut_ptr(), probs.len()),
            TdStatus::Ok
        );
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(
            td_model_predict_proba(m, loaded, probs.as_mut_ptr(), 89),
            TdStatus::InvalidArgument
        );

        let mpath = cstr(&dir.path().join("m.bin"));
        assert_eq!(td_model_save(m, mpath.as_ptr()), TdStatus::Ok);
        let mut m2 = ptr::null_mut();
        assert_eq!(td_model_load(mpath.as_ptr(), &mut m2), TdStatus::Ok);
        let mut again = vec![0.0; 90];
        assert_eq!(td_model_predict_proba(m2, loaded, again.as_mut_ptr(), 90), TdStatus::Ok);
        assert_eq!(probs, again);

        td_model_free(m);
        td_model_free(m2);
        td_dataset_free(ds);
        td_dataset_free(loaded);
        td_dataset_free(ptr::null_mut());
    }
}

#[test]
fn numeric_kernels() {
    unsafe {
        let a = [2.0, 0.0, 0.0, 3.0];
        let mut out = 0.0;
        assert_eq!(td_log_det(a.as_ptr(), 2, &mut out), TdStatus::Ok);
        assert!((out - 6f64.ln()).abs() < 1e-12);
        let bad = [1.0, 2.0, 2.0, 1.0];
        assert_eq!(td_log_det(bad.as_ptr(), 2, &mut out), TdStatus::NumericalDomain);
        assert!(!last_error().is_empty());

        // a single candidate identical to the single query item
        let v = [1.0, 0.0];
        let lam = 1e-3;
        assert_eq!(
            td_logdetmi(v.as_ptr(), 1, v.as_ptr(), 1, 2, [0usize].as_ptr(), 1, lam, &mut out),
            TdStatus::Ok
        );
        let s: f64 = 1.0 + lam;
        let expected = s.ln() - (s - 1.0 / s).ln();
        assert!((out - expected).abs() < 1e-9, "{out} vs {expected}");
        assert_eq!(
            td_logdetmi(v.as_ptr(), 1, v.as_ptr(), 1, 2, [3usize].as_ptr(), 1, lam, &mut out),
            TdStatus::InvalidArgument
        );

        let cand = [1.0, 0.0, 0.0, 1.0, 0.9, 0.1];
        let query = [1.0, 0.05];
        let mut idx = [9usize; 2];
        let mut gains = [0.0; 2];
        assert_eq!(
            td_smi_greedy(
                cand.as_ptr(),
                3,
                query.as_ptr(),
                1,
                2,
                2,
                lam,
                idx.as_mut_ptr(),
                gains.as_mut_ptr()
            ),
            TdStatus::Ok
        );
        assert!(idx[0] == 0 || idx[0] == 2);
        assert!(gains[0] > 0.0);
        assert_eq!(
            td_smi_greedy(
                cand.as_ptr(),
                3,
                query.as_ptr(),
                1,
                2,
                4,
                lam,
                idx.as_mut_ptr(),
                ptr::null_mut()
            ),
            TdStatus::InvalidArgument
        );

        assert_eq!(td_labeling_cost(10, 20, 3.0, 1.0, &mut out), TdStatus::Ok);
        assert_eq!(out, 40.0);
        assert_eq!(td_labeling_cost(21, 20, 3.0, 1.0, &mut out), TdStatus::InvalidArgument);
    }
}

#[test]
fn run_experiment_returns_results_json() {
    let cfg = CString::new(
        r#"{"dataset": {"kind": "synthetic", "num_classes": 3, "per_class": 20, "dim": 2, "spread": 1.0, "seed": 1},
            "seed_size": 6, "b1": 2, "b2": 2, "b3": 2, "rounds": 2, "runs": 2}"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let d = cstr(dir.path());
    unsafe {
        let mut out = ptr::null_mut();
        let st = td_run_experiment(cfg.as_ptr(), d.as_ptr(), &mut out);
        assert_eq!(st, TdStatus::Ok, "{}", last_error());
        let v: Value = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
        td_string_free(out);
        let runs = v.as_array().unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0]["rounds"].as_array().unwrap().len(), 3);
        assert!(dir.path().join("run_001.json").is_file());

        let mut out = ptr::null_mut();
        let junk = CString::new("{not json").unwrap();
        assert_eq!(
            td_run_experiment(junk.as_ptr(), ptr::null(), &mut out),
            TdStatus::Serialization
        );
        assert!(out.is_null());
    }
}

#[test]
fn null_and_invalid_arguments_report_errors() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(
            td_dataset_generate(1, 10, 2, 1.0, 0, &mut ds),
            TdStatus::InvalidArgument
        );
        assert!(ds.is_null());
        assert!(last_error().contains("num_classes"));

        assert_eq!(
            td_dataset_generate(3, 10, 2, 1.0, 0, ptr::null_mut()),
            TdStatus::NullPointer
        );
        let (mut r, mut d, mut c) = (0, 0, 0);
        assert_eq!(
            td_dataset_shape(ptr::null(), &mut r, &mut d, &mut c),
            TdStatus::NullPointer
        );
        assert_eq!(td_dataset_load(ptr::null(), &mut ds), TdStatus::NullPointer);

        let missing = CString::new("/nonexistent/ds.bin").unwrap();
        assert_eq!(td_dataset_load(missing.as_ptr(), &mut ds), TdStatus::Io);
        assert!(last_error().contains("/nonexistent/ds.bin"));

        td_string_free(ptr::null_mut());
        assert!(!CStr::from_ptr(td_version()).to_bytes().is_empty());
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/tieredal.h")).unwrap();
    for sym in [
        "TIEREDAL_H",
        "TD_STATUS_OK",
        "TD_STATUS_PANIC",
        "td_dataset_generate",
        "td_run_experiment",
        "td_smi_greedy",
    ] {
        assert!(header.contains(sym), "{sym}");
    }
}
