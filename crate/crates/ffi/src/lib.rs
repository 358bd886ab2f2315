//! C interface to `ssl-mtpp`.
//!
//! Pools and trained models cross the boundary as opaque handles owned by the
//! caller and released with their `_free` function. Every fallible call
//! returns an [`SslStatus`]; on failure, [`ssl_last_error`] describes the
//! problem for the calling thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ssl_mtpp::data::{
    generate_synthetic, make_protocol_splits, Batch, GeneratorConfig, MarkedSequence, SequencePool, SplitManifest, SplitView,
};
use ssl_mtpp::metrics::evaluate;
use ssl_mtpp::train::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainedModel};
use ssl_mtpp::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SslStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string was not UTF-8, or a numeric argument was out of range.
    InvalidArgument = 2,
    /// Input data, configuration or split was rejected.
    Validation = 3,
    Io = 4,
    /// Training or evaluation failed while running.
    Runtime = 5,
    Panic = 6,
}

/// A loaded or generated sequence pool.
pub struct SslPool(SequencePool);

/// A trained network with its feature scaler and configuration.
pub struct SslModel(TrainedModel);

/// Synthetic generator settings. Class priors are passed separately.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SslGeneratorConfig {
    pub sequences: usize,
    pub num_classes: usize,
    pub base_intensity: f64,
    pub excitation: f64,
    pub decay: f64,
    pub mean_length: f64,
    pub coupling: f64,
    pub window: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SslMetrics {
    pub avg_precision: f64,
    pub avg_precision_ranked: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub time_mae: f64,
    pub time_mae_raw: f64,
    pub events: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SslStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => SslStatus::Io,
            e if e.is_validation() => SslStatus::Validation,
            _ => SslStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SslStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SslStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SslStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(SslStatus::NullPointer, format!("`{name}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SslStatus::InvalidArgument, msg.into())
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn load_view(pool: &SequencePool, split_path: &str) -> Result<SplitView, Failure> {
    let manifest = SplitManifest::load(split_path)?;
    Ok(SplitView::new(pool, &manifest)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ssl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ssl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Fills `out` with the default generator settings.
///
/// # Safety
/// `out` must be null or point to writable memory for one `SslGeneratorConfig`.
#[no_mangle]
pub unsafe extern "C" fn ssl_generator_config_default(out: *mut SslGeneratorConfig) -> SslStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = GeneratorConfig::default();
        *out = SslGeneratorConfig {
            sequences: d.sequences,
            num_classes: d.num_classes,
            base_intensity: d.base_intensity,
            excitation: d.excitation,
            decay: d.decay,
            mean_length: d.mean_length,
            coupling: d.coupling,
            window: d.window,
        };
        Ok(())
    })
}

/// Generates a synthetic pool. With `num_priors == 0` the class priors are the defaults.
///
/// # Safety
/// `config` must point to a valid config, `priors` to `num_priors` doubles, and
/// `out` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ssl_pool_generate(
    config: *const SslGeneratorConfig,
    priors: *const f64,
    num_priors: usize,
    seed: u64,
    out: *mut *mut SslPool,
) -> SslStatus {
    guard(|| {
        let c = deref(config, "config")?;
        let mut gen = GeneratorConfig {
            sequences: c.sequences,
            num_classes: c.num_classes,
            base_intensity: c.base_intensity,
            excitation: c.excitation,
            decay: c.decay,
            mean_length: c.mean_length,
            coupling: c.coupling,
            window: c.window,
            ..GeneratorConfig::default()
        };
        if num_priors > 0 {
            gen.priors = slice(priors, num_priors, "priors")?.to_vec();
        }
        let pool = generate_synthetic(&gen, seed)?;
        write_out(out, SslPool(pool))
    })
}

/// Loads a JSON-lines pool file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ssl_pool_load(path: *const c_char, num_classes: usize, out: *mut *mut SslPool) -> SslStatus {
    guard(|| {
        let pool = SequencePool::load(string(path, "path")?, num_classes)?;
        write_out(out, SslPool(pool))
    })
}

/// # Safety
/// `pool` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ssl_pool_save(pool: *const SslPool, path: *const c_char) -> SslStatus {
    guard(|| Ok(deref(pool, "pool")?.0.save(string(path, "path")?)?))
}

/// # Safety
/// `pool` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ssl_pool_free(pool: *mut SslPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// Number of sequences; 0 for a null handle.
///
/// # Safety
/// `pool` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssl_pool_len(pool: *const SslPool) -> usize {
    pool.as_ref().map_or(0, |p| p.0.len())
}

/// Total number of events; 0 for a null handle.
///
/// # Safety
/// `pool` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssl_pool_events(pool: *const SslPool) -> usize {
    pool.as_ref().map_or(0, |p| p.0.events())
}

/// Writes `P-k.json` for each budget and `test.json` into `out_dir`.
///
/// # Safety
/// `pool` must be a live handle, `budgets` must point to `num_budgets` values,
/// and `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ssl_splits_write(
    pool: *const SslPool,
    budgets: *const usize,
    num_budgets: usize,
    test_events: usize,
    seed: u64,
    out_dir: *const c_char,
) -> SslStatus {
    guard(|| {
        let pool = &deref(pool, "pool")?.0;
        let budgets = slice(budgets, num_budgets, "budgets")?;
        if budgets.is_empty() {
            return Err(invalid("at least one budget is required"));
        }
        let dir = PathBuf::from(string(out_dir, "out_dir")?);
        let splits = make_protocol_splits(pool, budgets, test_events, seed)?;
        std::fs::create_dir_all(&dir).map_err(Error::from)?;
        for s in &splits {
            s.manifest.save(dir.join(format!("{}.json", s.name())))?;
        }
        let test = SplitManifest {
            protocol: "test".into(),
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            test: splits[0].manifest.test.clone(),
            seed,
        };
        Ok(test.save(dir.join("test.json"))?)
    })
}

/// Trains on the split at `split_path`. `config_toml` holds training settings
/// in the CLI config-file format; null means all defaults.
///
/// # Safety
/// `pool` must be a live handle, the strings NUL-terminated (or null for
/// `config_toml`), and `out` writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ssl_train(
    pool: *const SslPool,
    split_path: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut SslModel,
) -> SslStatus {
    guard(|| {
        let pool = &deref(pool, "pool")?.0;
        let config = if config_toml.is_null() {
            TrainConfig::default()
        } else {
            TrainConfig::from_toml_str(string(config_toml, "config_toml")?)?
        };
        let view = load_view(pool, string(split_path, "split_path")?)?;
        let outcome = train(&view, &config)?;
        write_out(out, SslModel(outcome.trained))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ssl_model_load(path: *const c_char, out: *mut *mut SslModel) -> SslStatus {
    guard(|| write_out(out, SslModel(load_checkpoint(string(path, "path")?)?)))
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ssl_model_save(model: *const SslModel, path: *const c_char) -> SslStatus {
    guard(|| Ok(save_checkpoint(&deref(model, "model")?.0, string(path, "path")?)?))
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ssl_model_free(model: *mut SslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of marker classes; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssl_model_num_classes(model: *const SslModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.model.config().num_classes)
}

/// Evaluates on the test part of the split at `split_path`.
///
/// # Safety
/// `model` and `pool` must be live handles, `split_path` NUL-terminated and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssl_model_evaluate(
    model: *const SslModel,
    pool: *const SslPool,
    split_path: *const c_char,
    out: *mut SslMetrics,
) -> SslStatus {
    guard(|| {
        let trained = &deref(model, "model")?.0;
        let pool = &deref(pool, "pool")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let view = load_view(pool, string(split_path, "split_path")?)?;
        let r = evaluate(trained, &view.test, 256)?;
        *out = SslMetrics {
            avg_precision: r.avg_precision,
            avg_precision_ranked: r.avg_precision_ranked,
            macro_f1: r.macro_f1,
            micro_f1: r.micro_f1,
            accuracy: r.accuracy,
            time_mae: r.time_mae,
            time_mae_raw: r.time_mae_raw,
            events: r.events,
        };
        Ok(())
    })
}

/// Next-event predictions for one sequence of `len` events.
///
/// Entry `t` of `markers_out` / `gaps_out` predicts event `t` from events
/// before it; entry 0 has no history and is set to -1 / NaN. Gaps are in the
/// original time units. Either output may be null.
///
/// # Safety
/// `times` and `markers` must point to `len` values; non-null outputs must
/// have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn ssl_model_predict(
    model: *const SslModel,
    times: *const f64,
    markers: *const i64,
    len: usize,
    markers_out: *mut i64,
    gaps_out: *mut f64,
) -> SslStatus {
    guard(|| {
        let trained = &deref(model, "model")?.0;
        let times = slice(times, len, "times")?;
        let classes = trained.model.config().num_classes;
        let marks = slice(markers, len, "markers")?
            .iter()
            .map(|&m| match usize::try_from(m) {
                Ok(k) if k < classes => Ok(k),
                _ => Err(invalid(format!("marker {m} outside 0..{classes}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let seq = MarkedSequence::new("ffi", times.to_vec(), Some(marks))?;
        let batch = Batch::from_sequences(&[&seq], &trained.scaler)?;
        let steps = trained.model.predict(&batch)?.remove(0);
        if !markers_out.is_null() {
            let out = std::slice::from_raw_parts_mut(markers_out, len);
            out[0] = -1;
            for (o, p) in out[1..].iter_mut().zip(&steps) {
                *o = p.argmax() as i64;
            }
        }
        if !gaps_out.is_null() {
            let out = std::slice::from_raw_parts_mut(gaps_out, len);
            out[0] = f64::NAN;
            for (o, p) in out[1..].iter_mut().zip(&steps) {
                *o = trained.scaler.inverse(p.gap);
            }
        }
        Ok(())
    })
}
