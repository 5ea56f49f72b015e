//! C interface over `eva_core`: opaque config and model handles, integer
//! status codes and a per-thread last-error message.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use eva_core::config::RunConfig;
use eva_core::corpus::{read_cohort, simulate_toy_cohort, write_cohort, CohortHeader};
use eva_core::generator::generate_cohort;
use eva_core::model::{TrainedModel, Variant};
use eva_core::pipeline::train_on_cohort;
use eva_core::EvaError;

/// Status returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Numerical = 6,
    Runtime = 7,
    Panic = 8,
}

/// Opaque run configuration.
pub struct EvaConfig {
    path: Option<PathBuf>,
    overrides: Vec<String>,
    run: RunConfig,
}

/// Opaque trained model.
pub struct EvaModel {
    model: TrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &EvaError) -> EvaStatus {
    match e {
        e if e.is_config_error() => EvaStatus::Config,
        EvaError::Io { .. } => EvaStatus::Io,
        EvaError::Parse { .. } | EvaError::Serde(_) => EvaStatus::Parse,
        EvaError::Numerical { .. } => EvaStatus::Numerical,
        _ => EvaStatus::Runtime,
    }
}

struct Fail(EvaStatus, String);

impl From<EvaError> for Fail {
    fn from(e: EvaError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EvaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EvaStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            EvaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(EvaStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(EvaStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(EvaStatus::NullPointer, format!("{name} is null")))
}

fn header(run: &RunConfig, names: &[String]) -> CohortHeader {
    CohortHeader {
        condition_names: names.to_vec(),
        config_digest: Some(run.digest()),
        seed: Some(run.seed),
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn eva_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a TOML config, or the defaults when `path` is null.
///
/// # Safety
/// `path` is null or a nul-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn eva_config_load(path: *const c_char, out: *mut *mut EvaConfig) -> EvaStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(EvaStatus::NullPointer, "out is null".into()));
        }
        let path = if path.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(path, "path")?))
        };
        let run = RunConfig::load(path.as_deref(), &[])?;
        *out = Box::into_raw(Box::new(EvaConfig {
            path,
            overrides: Vec::new(),
            run,
        }));
        Ok(())
    })
}

/// Applies one `key=value` override. On failure the config is unchanged.
///
/// # Safety
/// `config` comes from [`eva_config_load`]; `assignment` is nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn eva_config_set(config: *mut EvaConfig, assignment: *const c_char) -> EvaStatus {
    guard(|| {
        let cfg = config
            .as_mut()
            .ok_or_else(|| Fail(EvaStatus::NullPointer, "config is null".into()))?;
        let mut overrides = cfg.overrides.clone();
        overrides.push(str_arg(assignment, "assignment")?.to_owned());
        cfg.run = RunConfig::load(cfg.path.as_deref(), &overrides)?;
        cfg.overrides = overrides;
        Ok(())
    })
}

/// Writes the config digest (64 hex characters plus nul) into `buf`.
///
/// # Safety
/// `buf` points to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn eva_config_digest(config: *const EvaConfig, buf: *mut c_char, len: usize) -> EvaStatus {
    guard(|| {
        let cfg = ref_arg(config, "config")?;
        if buf.is_null() {
            return Err(Fail(EvaStatus::NullPointer, "buf is null".into()));
        }
        let d = cfg.run.digest();
        if len < d.len() + 1 {
            return Err(Fail(EvaStatus::Config, format!("buffer needs {} bytes", d.len() + 1)));
        }
        std::ptr::copy_nonoverlapping(d.as_ptr() as *const c_char, buf, d.len());
        *buf.add(d.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `config` is null or comes from [`eva_config_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn eva_config_free(config: *mut EvaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Simulates a toy cohort and writes it as JSONL.
///
/// # Safety
/// `config` is a live handle; `out_path` is nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn eva_simulate(config: *const EvaConfig, out_path: *const c_char) -> EvaStatus {
    guard(|| {
        let run = &ref_arg(config, "config")?.run;
        let out = str_arg(out_path, "out_path")?;
        let cohort = simulate_toy_cohort(&run.simulator_config(), run.seed)?;
        write_cohort(out.as_ref(), &cohort, Some(&header(run, &cohort.condition_names)))?;
        Ok(())
    })
}

/// Trains on a JSONL cohort and returns a model handle.
///
/// # Safety
/// `config` is a live handle; `cohort_path` is nul-terminated; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn eva_train(
    config: *const EvaConfig,
    cohort_path: *const c_char,
    out: *mut *mut EvaModel,
) -> EvaStatus {
    guard(|| {
        let run = &ref_arg(config, "config")?.run;
        let input = str_arg(cohort_path, "cohort_path")?;
        if out.is_null() {
            return Err(Fail(EvaStatus::NullPointer, "out is null".into()));
        }
        let (cohort, _) = read_cohort(input.as_ref())?;
        let model = train_on_cohort(run, &cohort, None, |_| {})?;
        *out = Box::into_raw(Box::new(EvaModel { model }));
        Ok(())
    })
}

/// # Safety
/// `path` is nul-terminated; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn eva_model_load(path: *const c_char, out: *mut *mut EvaModel) -> EvaStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        if out.is_null() {
            return Err(Fail(EvaStatus::NullPointer, "out is null".into()));
        }
        let model = TrainedModel::load(p.as_ref())?;
        *out = Box::into_raw(Box::new(EvaModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn eva_model_save(model: *const EvaModel, path: *const c_char) -> EvaStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        m.model.save(str_arg(path, "path")?.as_ref())?;
        Ok(())
    })
}

/// 1 for the conditional variant, 0 for the unconditional one, -1 on null.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eva_model_is_conditional(model: *const EvaModel) -> i32 {
    match model.as_ref() {
        None => -1,
        Some(m) => i32::from(m.model.variant() == Variant::Evac),
    }
}

/// Number of retained posterior samples, 0 on null.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eva_model_reservoir_len(model: *const EvaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.reservoir.len())
}

/// Generates records with the config's generation settings and writes
/// them as JSONL.
///
/// # Safety
/// Both handles are live; `out_path` is nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn eva_generate(
    model: *const EvaModel,
    config: *const EvaConfig,
    out_path: *const c_char,
) -> EvaStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.model;
        let run = &ref_arg(config, "config")?.run;
        let out = str_arg(out_path, "out_path")?;
        let request = run.generation_request(m)?;
        let cohort = generate_cohort(m, &request)?;
        write_cohort(out.as_ref(), &cohort, Some(&header(run, &cohort.condition_names)))?;
        Ok(())
    })
}

/// # Safety
/// `model` is null or a live handle that is not used again.
#[no_mangle]
pub unsafe extern "C" fn eva_model_free(model: *mut EvaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
