//! C ABI over the rs2sam library.
//!
//! Every fallible function returns an [`Rs2Status`]; on failure a message is
//! available from [`rs2_last_error`] on the same thread until the next call.
//! Models are opaque handles created by `rs2_model_new` or
//! `rs2_model_load` and released with `rs2_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rs2sam::checkpoint::Checkpoint;
use rs2sam::config::{Precision, RunConfig};
use rs2sam::data::{generate, write_dataset};
use rs2sam::harness::build_model;
use rs2sam::metrics::{binarize, evaluate, iou};
use rs2sam::model::Model;
use rs2sam::{Error, Real, Tensor};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rs2Status {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Internal = 6,
}

/// Opaque model handle.
pub struct Rs2Model {
    inner: AnyModel,
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> Rs2Status {
    match e {
        Error::InvalidInput(_) | Error::Shape { .. } | Error::Generation { .. } => Rs2Status::InvalidInput,
        Error::Config(_) => Rs2Status::Config,
        Error::Io { .. } => Rs2Status::Io,
        Error::Format { .. } => Rs2Status::Format,
        _ => Rs2Status::Internal,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (Rs2Status, String)>) -> Rs2Status {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Rs2Status::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            Rs2Status::Internal
        }
    }
}

fn lib(e: Error) -> (Rs2Status, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (Rs2Status, String) {
    (Rs2Status::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (Rs2Status, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (Rs2Status::InvalidInput, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (Rs2Status, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn model_from(cfg: &RunConfig) -> Result<AnyModel, Error> {
    Ok(match cfg.precision {
        Precision::F32 => AnyModel::F32(build_model(cfg)?),
        Precision::F64 => AnyModel::F64(build_model(cfg)?),
    })
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn rs2_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Create a freshly initialized model. `config_text` holds `key = value`
/// lines and may be null for the defaults.
///
/// # Safety
/// `config_text` must be null or a nul-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rs2_model_new(config_text: *const c_char, out: *mut *mut Rs2Model) -> Rs2Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_text.is_null() {
            RunConfig::default()
        } else {
            RunConfig::parse(str_arg(config_text, "config_text")?).map_err(lib)?
        };
        let inner = model_from(&cfg).map_err(lib)?;
        *out = Box::into_raw(Box::new(Rs2Model { inner }));
        Ok(())
    })
}

/// Load a trained model from a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rs2_model_load(path: *const c_char, out: *mut *mut Rs2Model) -> Rs2Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let ck = Checkpoint::load(Path::new(path)).map_err(lib)?;
        let cfg = ck.config().map_err(lib)?;
        let mut inner = model_from(&cfg).map_err(lib)?;
        match &mut inner {
            AnyModel::F32(m) => ck.restore_params(&mut m.store),
            AnyModel::F64(m) => ck.restore_params(&mut m.store),
        }
        .map_err(lib)?;
        *out = Box::into_raw(Box::new(Rs2Model { inner }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn rs2_model_free(model: *mut Rs2Model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input image size the model expects.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rs2_model_image_size(
    model: *const Rs2Model,
    height: *mut usize,
    width: *mut usize,
) -> Rs2Status {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        let (h, w) = match &m.inner {
            AnyModel::F32(m) => m.cfg.encoder.image_size,
            AnyModel::F64(m) => m.cfg.encoder.image_size,
        };
        *height = h;
        *width = w;
        Ok(())
    })
}

fn predict_mask<T: Real>(m: &Model<T>, rgb: &[u8], h: usize, w: usize, expr: &str) -> Result<Vec<u8>, Error> {
    let image = Tensor::new(&[h, w, 3], rgb.iter().map(|&v| T::of(f64::from(v) / 255.0)).collect())?;
    let logits = m.predict(&image, expr)?;
    Ok(binarize(logits.data()))
}

/// Segment the object described by `expression` in an interleaved RGB
/// image. Writes `height * width` values in {0, 1} to `mask_out`.
///
/// # Safety
/// `rgb` must hold `height * width * 3` bytes, `mask_out` `height * width`
/// bytes, and `expression` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rs2_model_predict(
    model: *const Rs2Model,
    rgb: *const u8,
    height: usize,
    width: usize,
    expression: *const c_char,
    mask_out: *mut u8,
) -> Rs2Status {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = height
            .checked_mul(width)
            .ok_or((Rs2Status::InvalidInput, "image size overflows".to_string()))?;
        let rgb = slice_arg(rgb, n * 3, "rgb")?;
        let expr = str_arg(expression, "expression")?;
        if mask_out.is_null() {
            return Err(null("mask_out"));
        }
        let mask = match &m.inner {
            AnyModel::F32(m) => predict_mask(m, rgb, height, width, expr),
            AnyModel::F64(m) => predict_mask(m, rgb, height, width, expr),
        }
        .map_err(lib)?;
        std::slice::from_raw_parts_mut(mask_out, n).copy_from_slice(&mask);
        Ok(())
    })
}

/// Intersection over union of two binary masks of `n` values in {0, 1}.
///
/// # Safety
/// `pred` and `gt` must hold `n` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rs2_iou(pred: *const u8, gt: *const u8, n: usize, out: *mut f64) -> Rs2Status {
    guard(|| {
        let p = slice_arg(pred, n, "pred")?;
        let g = slice_arg(gt, n, "gt")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = iou(p, g).map_err(lib)?;
        Ok(())
    })
}

/// Dataset metrics over `count` mask pairs of `pixels` values each, stored
/// back to back. Writes Pr@0.5, Pr@0.6, Pr@0.7, Pr@0.8, Pr@0.9, oIoU and
/// mIoU (percentages) to `out[0..7]`.
///
/// # Safety
/// `preds` and `gts` must hold `count * pixels` bytes; `out` must hold 7
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn rs2_evaluate(
    preds: *const u8,
    gts: *const u8,
    count: usize,
    pixels: usize,
    out: *mut f64,
) -> Rs2Status {
    guard(|| {
        let total = count
            .checked_mul(pixels)
            .ok_or((Rs2Status::InvalidInput, "size overflows".to_string()))?;
        let p = slice_arg(preds, total, "preds")?;
        let g = slice_arg(gts, total, "gts")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if pixels == 0 {
            return Err((Rs2Status::InvalidInput, "pixels must be nonzero".into()));
        }
        let pairs: Vec<(&[u8], &[u8])> = p.chunks(pixels).zip(g.chunks(pixels)).collect();
        let report = evaluate(&pairs).map_err(lib)?;
        std::slice::from_raw_parts_mut(out, 7).copy_from_slice(&report.row());
        Ok(())
    })
}

/// Write `n` synthetic samples (seeds `seed..seed + n`) with the default
/// generator settings to `out_dir`.
///
/// # Safety
/// `out_dir` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rs2_synth_dataset(out_dir: *const c_char, n: usize, seed: u64) -> Rs2Status {
    guard(|| {
        let dir = str_arg(out_dir, "out_dir")?;
        let samples = generate(n, seed, &RunConfig::default().data).map_err(lib)?;
        write_dataset(&samples, Path::new(dir)).map_err(lib)
    })
}
