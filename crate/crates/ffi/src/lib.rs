//! C ABI over the `fusionformer` engine.
//!
//! Models are opaque `FfModel` handles owned by the caller and released with
//! `ff_model_free`. Every fallible call returns an `FfStatus`; on failure the
//! message is available from `ff_last_error` on the same thread until the
//! next failing call. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fusionformer::fusion::fuse_model;
use fusionformer::io::{load_model, save_model};
use fusionformer::ltp::{noam_lr, ScheduleParams};
use fusionformer::streaming::ChunkWindow;
use fusionformer::{build_model, Error, Flavor, Model, ModelConfig, Tensor};

/// Opaque model handle.
pub struct FfModel {
    inner: Model,
}

#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Fusion = 5,
    Dimension = 6,
    Divergence = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FfStatus {
    match e {
        Error::Io { .. } => FfStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => FfStatus::Format,
        Error::Fusion { .. } | Error::Quantization(_) => FfStatus::Fusion,
        Error::Dimension { .. } | Error::InputTooShort { .. } | Error::WeightStore(_) => FfStatus::Dimension,
        Error::Divergence { .. } => FfStatus::Divergence,
        _ => FfStatus::InvalidArgument,
    }
}

fn fail(status: FfStatus, message: impl Into<String>) -> FfStatus {
    set_error(message.into());
    status
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), FfStatus>) -> FfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FfStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(FfStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn check(r: fusionformer::Result<()>) -> Result<(), FfStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn lift<T>(r: fusionformer::Result<T>) -> Result<T, FfStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, FfStatus> {
    if p.is_null() {
        return Err(fail(FfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FfStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn model_arg<'a>(m: *const FfModel) -> Result<&'a FfModel, FfStatus> {
    m.as_ref().ok_or_else(|| fail(FfStatus::NullPointer, "model is null"))
}

unsafe fn emit(out: *mut *mut FfModel, model: Model) -> Result<(), FfStatus> {
    *out = Box::into_raw(Box::new(FfModel { inner: model }));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a randomly initialized model with default feed-forward, kernel,
/// vocabulary and feature sizes.
///
/// # Safety
/// `flavor` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_model_init(
    flavor: *const c_char,
    encoder_blocks: usize,
    decoder_blocks: usize,
    hidden: usize,
    heads: usize,
    seed: u64,
    out: *mut *mut FfModel,
) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FfStatus::NullPointer, "out is null"));
        }
        let flavor: Flavor = lift(str_arg(flavor, "flavor")?.parse())?;
        let config = ModelConfig::new(flavor, encoder_blocks, decoder_blocks, hidden, heads);
        emit(out, lift(build_model(config, seed))?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_model_load(path: *const c_char, out: *mut *mut FfModel) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FfStatus::NullPointer, "out is null"));
        }
        let path = str_arg(path, "path")?;
        emit(out, lift(load_model(path))?)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ff_model_save(model: *const FfModel, path: *const c_char) -> FfStatus {
    guard(|| {
        let m = model_arg(model)?;
        check(save_model(&m.inner, str_arg(path, "path")?))
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ff_model_free(model: *mut FfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total parameter count, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ff_model_param_count(model: *const FfModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.param_count() as u64)
}

/// Input feature width and hidden size of a model.
///
/// # Safety
/// `model` must come from this library; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_model_dims(model: *const FfModel, feat_dim: *mut usize, hidden: *mut usize) -> FfStatus {
    guard(|| {
        let m = model_arg(model)?;
        if feat_dim.is_null() || hidden.is_null() {
            return Err(fail(FfStatus::NullPointer, "output pointer is null"));
        }
        *feat_dim = m.inner.config.input_feat_dim;
        *hidden = m.inner.config.hidden;
        Ok(())
    })
}

/// Folds BatchNorm and ReLU into a new handle; the input is left untouched.
///
/// # Safety
/// `model` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_model_fuse(model: *const FfModel, out: *mut *mut FfModel) -> FfStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(fail(FfStatus::NullPointer, "out is null"));
        }
        let (fused, _) = lift(fuse_model(&m.inner))?;
        emit(out, fused)
    })
}

/// Runs the encoder on `frames` rows of `feat_dim` features (row-major).
/// `chunk_size` 0 means full context and `left_chunks` < 0 means unlimited
/// history. Writes `out_frames * hidden` values to `out`; when `capacity` is
/// too small nothing is written, `out_frames` still receives the row count
/// and `BufferTooSmall` is returned.
///
/// # Safety
/// `features` must hold `frames * feat_dim` floats, `out` must hold
/// `capacity` floats, and `out_frames` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_encoder_forward(
    model: *const FfModel,
    features: *const f32,
    frames: usize,
    feat_dim: usize,
    chunk_size: usize,
    left_chunks: i64,
    out: *mut f32,
    capacity: usize,
    out_frames: *mut usize,
) -> FfStatus {
    guard(|| {
        let m = model_arg(model)?;
        if features.is_null() || out_frames.is_null() {
            return Err(fail(FfStatus::NullPointer, "features or out_frames is null"));
        }
        let cfg = &m.inner.config;
        if feat_dim != cfg.input_feat_dim {
            return Err(fail(
                FfStatus::Dimension,
                format!("feat_dim {feat_dim} but the model expects {}", cfg.input_feat_dim),
            ));
        }
        let rows = cfg.subsampled_frames(frames);
        *out_frames = rows;
        let needed = rows * cfg.hidden;
        if capacity < needed {
            return Err(fail(
                FfStatus::BufferTooSmall,
                format!("output needs {needed} floats, capacity is {capacity}"),
            ));
        }
        if out.is_null() {
            return Err(fail(FfStatus::NullPointer, "out is null"));
        }
        let window = lift(ChunkWindow::new(
            (chunk_size > 0).then_some(chunk_size),
            usize::try_from(left_chunks).ok(),
        ))?;
        let input = std::slice::from_raw_parts(features, frames * feat_dim).to_vec();
        let x = lift(Tensor::new(vec![frames, feat_dim], input))?;
        let y = lift(m.inner.encoder_forward(&x, window))?;
        ptr::copy_nonoverlapping(y.data().as_ptr(), out, y.len());
        Ok(())
    })
}

/// Learning rate of the warmup/decay schedule at `step`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_noam_lr(peak: f64, warmup: u64, step: u64, out: *mut f64) -> FfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FfStatus::NullPointer, "out is null"));
        }
        *out = lift(noam_lr(ScheduleParams {
            lr_peak: peak,
            warmup,
            step,
        }))?;
        Ok(())
    })
}
