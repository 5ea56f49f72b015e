use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use eva_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = eva_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn small_config() -> *mut EvaConfig {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(eva_config_load(ptr::null(), &mut cfg), EvaStatus::Ok);
        for kv in [
            "n_records=80",
            "iterations=20",
            "thinning=5",
            "latent_dim=8",
            "channels=8",
            "embed_dim=8",
            "lstm_hidden=8",
            "mlp_hidden=8",
            "count=12",
        ] {
            assert_eq!(eva_config_set(cfg, c(kv).as_ptr()), EvaStatus::Ok, "{kv}");
        }
    }
    cfg
}

#[test]
fn simulate_train_save_load_generate() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| c(dir.path().join(n).to_str().unwrap());
    let cfg = small_config();
    unsafe {
        assert_eq!(eva_simulate(cfg, p("c.jsonl").as_ptr()), EvaStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(eva_train(cfg, p("c.jsonl").as_ptr(), &mut model), EvaStatus::Ok);
        assert_eq!(eva_model_is_conditional(model), 0);
        assert_eq!(eva_model_reservoir_len(model), 2);
        assert_eq!(eva_model_save(model, p("m.json").as_ptr()), EvaStatus::Ok);
        eva_model_free(model);

        let mut loaded = ptr::null_mut();
        assert_eq!(eva_model_load(p("m.json").as_ptr(), &mut loaded), EvaStatus::Ok);
        assert_eq!(eva_generate(loaded, cfg, p("a.jsonl").as_ptr()), EvaStatus::Ok);
        assert_eq!(eva_generate(loaded, cfg, p("b.jsonl").as_ptr()), EvaStatus::Ok);
        eva_model_free(loaded);
    }
    let a = std::fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a.lines().count(), 13);
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b.jsonl")).unwrap());

    let mut buf = [0 as std::ffi::c_char; 65];
    unsafe {
        assert_eq!(eva_config_digest(cfg, buf.as_mut_ptr(), buf.len()), EvaStatus::Ok);
        let d = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert!(a.contains(d));
        assert_eq!(eva_config_digest(cfg, buf.as_mut_ptr(), 10), EvaStatus::Config);
        eva_config_free(cfg);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let cfg = small_config();
    unsafe {
        assert_eq!(eva_config_set(cfg, c("bogus=1").as_ptr()), EvaStatus::Config);
        assert!(last_error().contains("bogus"));
        assert_eq!(eva_config_set(cfg, ptr::null()), EvaStatus::NullPointer);
        assert_eq!(eva_simulate(ptr::null(), c("x").as_ptr()), EvaStatus::NullPointer);

        let mut model = ptr::null_mut();
        assert_eq!(eva_model_load(c("/nonexistent/m.json").as_ptr(), &mut model), EvaStatus::Io);
        assert!(model.is_null());

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{").unwrap();
        assert_eq!(eva_model_load(c(bad.to_str().unwrap()).as_ptr(), &mut model), EvaStatus::Parse);

        let invalid = [0xffu8, 0];
        assert_eq!(eva_model_load(invalid.as_ptr().cast(), &mut model), EvaStatus::InvalidUtf8);

        let cohort = dir.path().join("c.jsonl");
        assert_eq!(eva_simulate(cfg, c(cohort.to_str().unwrap()).as_ptr()), EvaStatus::Ok);
        assert_eq!(eva_train(cfg, c(cohort.to_str().unwrap()).as_ptr(), &mut model), EvaStatus::Ok);
        assert_eq!(eva_config_set(cfg, c("mode=\"conditional\"").as_ptr()), EvaStatus::Ok);
        assert_eq!(eva_generate(model, cfg, c("unused").as_ptr()), EvaStatus::Config);
        assert_eq!(last_error(), "conditional generation requires evac");
        assert_eq!(eva_model_is_conditional(ptr::null()), -1);
        eva_model_free(model);
        eva_model_free(ptr::null_mut());
        eva_config_free(cfg);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/eva.h");
    assert!(header.is_file());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"eva.h\"\nint main(void) { EvaConfig *c = 0; return eva_config_load(0, &c) == EVA_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
