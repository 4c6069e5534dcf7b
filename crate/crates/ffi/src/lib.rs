//! C ABI over the `hypergpa` crate.
//!
//! Corpora and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns an [`HgpaStatus`]; on failure the
//! message is available from [`hgpa_last_error`] on the same thread until
//! the next failing call there.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hypergpa::autodiff::Tensor;
use hypergpa::cli::{fit_method, RunConfig, Trained};
use hypergpa::data::{normalize, TimeSeriesCorpus};
use hypergpa::metrics::evaluate;
use hypergpa::train::{load_checkpoint, save_checkpoint, Forecaster};
use hypergpa::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HgpaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    InvalidArgument = 5,
    Io = 6,
    Parse = 7,
    Runtime = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A set of `series × periods` blocks of `period_len × dim` values.
pub struct HgpaCorpus {
    inner: TimeSeriesCorpus,
}

/// A trained forecaster of any method.
pub struct HgpaModel {
    inner: Trained,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Status(HgpaStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn status_of(e: &Error) -> HgpaStatus {
    match e {
        Error::Config { .. } => HgpaStatus::Config,
        Error::Shape(_) => HgpaStatus::Shape,
        Error::Invalid(_) | Error::Data(_) => HgpaStatus::InvalidArgument,
        Error::Io(_) => HgpaStatus::Io,
        Error::Serde(_) => HgpaStatus::Parse,
        Error::Contract(_) | Error::NonFinite(_) => HgpaStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HgpaStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return HgpaStatus::Ok,
        Ok(Err(Fail::Status(s, m))) => (s, m),
        Ok(Err(Fail::Core(e))) => (status_of(&e), e.to_string()),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (HgpaStatus::Panic, format!("panic: {m}"))
        }
    };
    set_error(msg);
    status
}

fn null(what: &str) -> Fail {
    Fail::Status(HgpaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::Status(HgpaStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// Null means all defaults.
unsafe fn config(toml: *const c_char) -> Result<RunConfig, Fail> {
    let cfg = if toml.is_null() {
        RunConfig::default()
    } else {
        RunConfig::parse(&string(toml, "config")?)?
    };
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failing call on this thread; never null. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hgpa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn hgpa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds the corpus described by a run configuration (TOML text, or null
/// for the default synthetic corpus).
///
/// # Safety
/// `config_toml` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hgpa_corpus_from_config(config_toml: *const c_char, out: *mut *mut HgpaCorpus) -> HgpaStatus {
    guard(|| {
        let inner = config(config_toml)?.load_corpus()?;
        put(out, HgpaCorpus { inner })
    })
}

/// Copies `series * periods * period_len * dim` values laid out series,
/// then period, then time step, then feature.
///
/// # Safety
/// `values` points to that many readable doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hgpa_corpus_from_values(
    values: *const f64,
    series: usize,
    periods: usize,
    period_len: usize,
    dim: usize,
    out: *mut *mut HgpaCorpus,
) -> HgpaStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        let block = period_len
            .checked_mul(dim)
            .filter(|b| *b > 0)
            .ok_or_else(|| Fail::Status(HgpaStatus::InvalidArgument, "empty or oversized period".into()))?;
        let total = block
            .checked_mul(periods)
            .and_then(|v| v.checked_mul(series))
            .ok_or_else(|| Fail::Status(HgpaStatus::InvalidArgument, "corpus size overflows".into()))?;
        let data = std::slice::from_raw_parts(values, total);
        let blocks = (0..series)
            .map(|i| {
                (0..periods)
                    .map(|j| {
                        let at = (i * periods + j) * block;
                        Tensor::new(&[period_len, dim], data[at..at + block].to_vec())
                    })
                    .collect()
            })
            .collect();
        put(
            out,
            HgpaCorpus {
                inner: TimeSeriesCorpus::new(blocks)?,
            },
        )
    })
}

/// Z-scores each series in place with statistics of its training periods
/// (all but the last two), as the command line does before training.
///
/// # Safety
/// `corpus` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn hgpa_corpus_normalize(corpus: *mut HgpaCorpus) -> HgpaStatus {
    guard(|| {
        let c = corpus.as_mut().ok_or_else(|| null("corpus"))?;
        c.inner = normalize(&c.inner)?.0;
        Ok(())
    })
}

/// # Safety
/// `corpus` is a live handle; the out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn hgpa_corpus_shape(
    corpus: *const HgpaCorpus,
    series: *mut usize,
    periods: *mut usize,
    dim: *mut usize,
) -> HgpaStatus {
    guard(|| {
        let c = &get(corpus, "corpus")?.inner;
        if series.is_null() || periods.is_null() || dim.is_null() {
            return Err(null("out"));
        }
        *series = c.series();
        *periods = c.periods();
        *dim = c.dim();
        Ok(())
    })
}

/// # Safety
/// `corpus` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hgpa_corpus_free(corpus: *mut HgpaCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Trains the configured method (`method`, `arch`, optimizer sections of
/// the TOML; null for defaults) on `corpus` as given.
///
/// # Safety
/// `config_toml` is null or NUL-terminated; `corpus` is live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hgpa_model_train(
    config_toml: *const c_char,
    corpus: *const HgpaCorpus,
    seed: u64,
    out: *mut *mut HgpaModel,
) -> HgpaStatus {
    guard(|| {
        let cfg = config(config_toml)?;
        let c = &get(corpus, "corpus")?.inner;
        let arch = cfg.arch.arch(c.dim());
        let (inner, _) = fit_method(&cfg, cfg.method, arch, c, seed, cfg.method.as_str())?;
        put(out, HgpaModel { inner })
    })
}

/// # Safety
/// `model` is live; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hgpa_model_save(model: *const HgpaModel, path: *const c_char) -> HgpaStatus {
    guard(|| {
        let m = get(model, "model")?;
        let path = PathBuf::from(string(path, "path")?);
        save_checkpoint(path, &m.inner.checkpoint()?)?;
        Ok(())
    })
}

/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hgpa_model_load(path: *const c_char, out: *mut *mut HgpaModel) -> HgpaStatus {
    guard(|| {
        let ckpt = load_checkpoint(PathBuf::from(string(path, "path")?))?;
        put(
            out,
            HgpaModel {
                inner: Trained::from_checkpoint(&ckpt)?,
            },
        )
    })
}

fn forecast(m: &HgpaModel, c: &TimeSeriesCorpus, target: usize) -> Result<Vec<f64>, Fail> {
    if target >= c.periods() {
        return Err(Fail::Status(
            HgpaStatus::InvalidArgument,
            format!("period {target} out of range for {} periods", c.periods()),
        ));
    }
    let preds = m.inner.predict(c, target)?;
    Ok(preds.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Writes forecasts of every window in period `target`, series-major, each
/// series `pairs × s_out × dim`. With `out` null only `written` is set, to
/// the required length.
///
/// # Safety
/// `model` and `corpus` are live; `out` is null or has `capacity` writable
/// doubles; `written` is writable.
#[no_mangle]
pub unsafe extern "C" fn hgpa_model_forecast(
    model: *const HgpaModel,
    corpus: *const HgpaCorpus,
    target: usize,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> HgpaStatus {
    guard(|| {
        let values = forecast(get(model, "model")?, &get(corpus, "corpus")?.inner, target)?;
        if written.is_null() {
            return Err(null("written"));
        }
        *written = values.len();
        if out.is_null() {
            return Ok(());
        }
        if capacity < values.len() {
            return Err(Fail::Status(
                HgpaStatus::BufferTooSmall,
                format!("need {} values, buffer holds {capacity}", values.len()),
            ));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
        Ok(())
    })
}

/// Pooled MSE of the model's forecasts on the last period.
///
/// # Safety
/// `model` and `corpus` are live; `mse` is writable.
#[no_mangle]
pub unsafe extern "C" fn hgpa_model_test_mse(
    model: *const HgpaModel,
    corpus: *const HgpaCorpus,
    mse: *mut f64,
) -> HgpaStatus {
    guard(|| {
        let m = get(model, "model")?;
        let c = &get(corpus, "corpus")?.inner;
        if mse.is_null() {
            return Err(null("mse"));
        }
        *mse = evaluate(&m.inner, c, c.periods() - 1)?.metrics.mse;
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hgpa_model_free(model: *mut HgpaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
