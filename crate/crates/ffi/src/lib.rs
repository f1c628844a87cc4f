//! C ABI over the `mabn` library.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free`. Every entry point returns a [`MabnStatus`]; on failure
//! [`mabn_last_error`] describes the most recent error on the calling thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mabn::adapt::{adapt_domain, draw_support, predict_labels, EvalConfig};
use mabn::data::{DomainSet, Split};
use mabn::metrics::Metrics;
use mabn::nn::{checkpoint, BnMode, Model, Scope};
use mabn::ssl::{SslKind, SslTaskConfig};
use mabn::tensor::Tensor;
use mabn::training::{derive_seed, InnerConfig};
use mabn::Error;

/// A trained or adapted network.
pub struct MabnModel(Model);

/// A multi-domain dataset loaded from an `MABD` file.
pub struct MabnDataset(DomainSet);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MabnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptFile = 4,
    ShapeMismatch = 5,
    ScopeViolation = 6,
    NonFinite = 7,
    Panic = 8,
    Other = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MabnScope {
    /// Adapt gamma and beta with frozen running statistics.
    AffineOnly = 0,
    /// Also re-estimate running statistics from the support set.
    FullBn = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MabnAdaptOptions {
    /// Inner learning rate.
    pub alpha: f64,
    pub steps: u32,
    pub scope: MabnScope,
    /// Support rows drawn per target domain by `mabn_evaluate`.
    pub support_size: u32,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MabnMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub worst_case_accuracy: f64,
    pub n_samples: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(MabnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => MabnStatus::Io,
            Error::CorruptFile(_) | Error::TruncatedFile(_) => MabnStatus::CorruptFile,
            Error::ShapeMismatch { .. } | Error::ChannelMismatch { .. } | Error::LayoutMismatch(_) => {
                MabnStatus::ShapeMismatch
            }
            Error::ScopeViolation(_) | Error::ModeViolation { .. } => MabnStatus::ScopeViolation,
            Error::NonFinite { .. } | Error::DivergenceDetected { .. } => MabnStatus::NonFinite,
            Error::Config(_)
            | Error::InvalidSpec(_)
            | Error::EmptySupport
            | Error::EmptyTestSet
            | Error::EmptyBatch
            | Error::InsufficientSamples { .. } => MabnStatus::InvalidArgument,
            _ => MabnStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: MabnStatus, msg: &str) -> Result<T, Failure> {
    Err(Failure(status, msg.to_string()))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MabnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MabnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MabnStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return fail(MabnStatus::NullArgument, "path is null");
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(MabnStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

unsafe fn model_arg<'a>(model: *const MabnModel) -> Result<&'a Model, Failure> {
    model.as_ref().map(|m| &m.0).ok_or(Failure(MabnStatus::NullArgument, "model is null".into()))
}

/// `n` samples of `model`'s input shape read from `data`.
unsafe fn input_arg(model: &Model, data: *const f64, n: usize) -> Result<Tensor, Failure> {
    if data.is_null() {
        return fail(MabnStatus::NullArgument, "input buffer is null");
    }
    if n == 0 {
        return fail(MabnStatus::InvalidArgument, "input has no rows");
    }
    let mut shape = vec![n];
    shape.extend(model.config().backbone.sample_shape());
    let len = shape.iter().product();
    let values = std::slice::from_raw_parts(data, len).to_vec();
    Ok(Tensor::new(&shape, values, false)?)
}

fn ssl_for(model: &Model) -> SslTaskConfig {
    let kind = if model.is_byol_head() { SslKind::ByolLite } else { SslKind::Rotation4 };
    SslTaskConfig { kind, ..SslTaskConfig::default() }
}

fn inner_for(opts: &MabnAdaptOptions) -> InnerConfig {
    let scope = match opts.scope {
        MabnScope::AffineOnly => Scope::AffineOnly,
        MabnScope::FullBn => Scope::FullBn,
    };
    InnerConfig { alpha: opts.alpha, scope, steps: opts.steps as usize, fullbn_retention: None }
}

fn eval_model(model: &Model) -> Model {
    let mut m = model.clone();
    m.set_mode(BnMode::Eval);
    m
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mabn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mabn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint into a new handle stored in `*out`.
///
/// # Safety
/// `path` is a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mabn_model_load(path: *const c_char, out: *mut *mut MabnModel) -> MabnStatus {
    guard(|| {
        if out.is_null() {
            return fail(MabnStatus::NullArgument, "out is null");
        }
        let model = checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MabnModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mabn_model_save(model: *const MabnModel, path: *const c_char) -> MabnStatus {
    guard(|| Ok(checkpoint::save(model_arg(model)?, &path_arg(path)?)?))
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mabn_model_free(model: *mut MabnModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Writes the 64-hex-digit weight hash plus a NUL into `buf` (at least 65 bytes).
///
/// # Safety
/// `model` is a live handle and `buf` holds `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mabn_model_theta_hash(model: *const MabnModel, buf: *mut c_char, len: usize) -> MabnStatus {
    guard(|| {
        let hash = model_arg(model)?.theta_hash();
        if buf.is_null() {
            return fail(MabnStatus::NullArgument, "buffer is null");
        }
        if len <= hash.len() {
            return fail(MabnStatus::InvalidArgument, "buffer too small for the hash");
        }
        let dst = std::slice::from_raw_parts_mut(buf.cast::<u8>(), hash.len() + 1);
        dst[..hash.len()].copy_from_slice(hash.as_bytes());
        dst[hash.len()] = 0;
        Ok(())
    })
}

/// Number of `double` values in one input sample, and the number of classes.
///
/// # Safety
/// `model` is a live handle; the outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn mabn_model_dims(
    model: *const MabnModel,
    sample_len: *mut usize,
    num_classes: *mut usize,
) -> MabnStatus {
    guard(|| {
        let m = model_arg(model)?;
        if sample_len.is_null() || num_classes.is_null() {
            return fail(MabnStatus::NullArgument, "output is null");
        }
        *sample_len = m.config().backbone.sample_shape().iter().product();
        *num_classes = m.config().task.outputs();
        Ok(())
    })
}

/// Adapts a copy of `model` on `n` unlabeled support rows and stores it in
/// `*out`. `model` is unchanged.
///
/// # Safety
/// `model` is a live handle, `support` holds `n` samples, `opts` and `out`
/// are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mabn_model_adapt(
    model: *const MabnModel,
    support: *const f64,
    n: usize,
    opts: *const MabnAdaptOptions,
    out: *mut *mut MabnModel,
) -> MabnStatus {
    guard(|| {
        let m = model_arg(model)?;
        let Some(opts) = opts.as_ref() else { return fail(MabnStatus::NullArgument, "options are null") };
        if out.is_null() {
            return fail(MabnStatus::NullArgument, "out is null");
        }
        let x = input_arg(m, support, n)?;
        let adapted = adapt_domain(m, &x, &inner_for(opts), &ssl_for(m), opts.seed)?;
        *out = Box::into_raw(Box::new(MabnModel(adapted)));
        Ok(())
    })
}

/// Predicted class of each of `n` rows, written to `labels`.
///
/// # Safety
/// `model` is a live handle, `x` holds `n` samples and `labels` `n` slots.
#[no_mangle]
pub unsafe extern "C" fn mabn_model_predict(
    model: *const MabnModel,
    x: *const f64,
    n: usize,
    labels: *mut u32,
) -> MabnStatus {
    guard(|| {
        let m = model_arg(model)?;
        if labels.is_null() {
            return fail(MabnStatus::NullArgument, "labels buffer is null");
        }
        let x = input_arg(m, x, n)?;
        let preds = predict_labels(&eval_model(m), &x, 256)?;
        let dst = std::slice::from_raw_parts_mut(labels, n);
        dst.iter_mut().zip(preds).for_each(|(d, p)| *d = p as u32);
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mabn_dataset_load(path: *const c_char, out: *mut *mut MabnDataset) -> MabnStatus {
    guard(|| {
        if out.is_null() {
            return fail(MabnStatus::NullArgument, "out is null");
        }
        let set = mabn::data::load_dataset(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MabnDataset(set)));
        Ok(())
    })
}

/// # Safety
/// `dataset` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mabn_dataset_free(dataset: *mut MabnDataset) {
    if !dataset.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(dataset))));
    }
}

/// Evaluates `model` on the test split of every target domain. With
/// non-null `opts`, each domain is first adapted on a support set drawn from
/// its train split; otherwise the model is used as is.
///
/// # Safety
/// `model` and `dataset` are live handles, `opts` is null or valid, `out`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn mabn_evaluate(
    model: *const MabnModel,
    dataset: *const MabnDataset,
    opts: *const MabnAdaptOptions,
    out: *mut MabnMetrics,
) -> MabnStatus {
    guard(|| {
        let m = model_arg(model)?;
        let Some(set) = dataset.as_ref().map(|d| &d.0) else {
            return fail(MabnStatus::NullArgument, "dataset is null");
        };
        if out.is_null() {
            return fail(MabnStatus::NullArgument, "out is null");
        }
        if set.targets.is_empty() {
            return fail(MabnStatus::InvalidArgument, "dataset has no target domains");
        }
        let mut parts = Vec::with_capacity(set.targets.len());
        for d in &set.targets {
            let model = match opts.as_ref() {
                Some(o) => {
                    let eval = EvalConfig { support_size: o.support_size as usize, ..EvalConfig::default() };
                    let support = draw_support(d, &eval, o.seed)?;
                    adapt_domain(m, &support, &inner_for(o), &ssl_for(m), derive_seed(o.seed, &[d.id as u64]))?
                }
                None => eval_model(m),
            };
            let (x, y) = d.split(Split::Test);
            if y.is_empty() {
                return fail(MabnStatus::InvalidArgument, "a target domain has an empty test split");
            }
            parts.push((d.id, predict_labels(&model, &x, 256)?, y));
        }
        let metrics = Metrics::from_domains(&parts, set.num_classes);
        *out = MabnMetrics {
            accuracy: metrics.accuracy,
            macro_f1: metrics.macro_f1,
            worst_case_accuracy: metrics.worst_case_accuracy,
            n_samples: metrics.n_samples as u64,
        };
        Ok(())
    })
}
