//! C ABI for loading a trained `cjcrf` model and running detection.
//!
//! All functions return a [`CjcrfStatus`]; on failure a message describing
//! the last error on the calling thread is available through
//! [`cjcrf_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cjcrf::cascade::{infer, CascadeModel};
use cjcrf::geometry::{FaceBox, GrayImage};
use cjcrf::{Error, ModelFile};

/// Opaque handle to a loaded model.
pub struct CjcrfModel {
    inner: CascadeModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CjcrfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    ModelFormat = 4,
    DimensionMismatch = 5,
    Internal = 6,
}

/// Face box in image pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CjcrfBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> CjcrfStatus {
    match err {
        Error::Io { .. } => CjcrfStatus::Io,
        Error::ModelFormat(_) | Error::Json(_) | Error::Parse { .. } => CjcrfStatus::ModelFormat,
        Error::DimensionMismatch(_) | Error::InvalidIndex(_) => CjcrfStatus::DimensionMismatch,
        _ => CjcrfStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and converting panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), (CjcrfStatus, String)>) -> CjcrfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CjcrfStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CjcrfStatus::Internal
        }
    }
}

fn fail(err: Error) -> (CjcrfStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(name: &str) -> (CjcrfStatus, String) {
    (CjcrfStatus::NullArgument, format!("{name} is null"))
}

/// Loads a model file and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer to
/// writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn cjcrf_model_load(
    path: *const c_char,
    out: *mut *mut CjcrfModel,
) -> CjcrfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: non-null and NUL-terminated per the contract above.
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| {
            (
                CjcrfStatus::InvalidArgument,
                "path is not UTF-8".to_string(),
            )
        })?;
        let model = ModelFile::load(Path::new(path)).map_err(fail)?.model;
        let handle = Box::into_raw(Box::new(CjcrfModel { inner: model }));
        // SAFETY: `out` is non-null and writable per the contract above.
        unsafe { *out = handle };
        Ok(())
    })
}

/// Releases a handle returned by [`cjcrf_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn cjcrf_model_free(model: *mut CjcrfModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in cjcrf_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of landmarks the model predicts, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cjcrf_model_landmark_count(model: *const CjcrfModel) -> usize {
    // SAFETY: null or live per the contract above.
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.n_landmarks())
}

/// Number of action units the model predicts, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cjcrf_model_au_count(model: *const CjcrfModel) -> usize {
    // SAFETY: null or live per the contract above.
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.n_aus())
}

/// Number of cascade stages, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cjcrf_model_stage_count(model: *const CjcrfModel) -> usize {
    // SAFETY: null or live per the contract above.
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.stages.len())
}

/// Detects landmarks and AU probabilities in an 8-bit grayscale image.
///
/// `pixels` holds `height` rows of `stride` bytes, of which the first `width`
/// are used. `landmarks_out` receives `2 * landmark_count` values
/// (`x0, y0, x1, y1, …` in pixels) and `probs_out` receives `au_count`
/// probabilities. When `labels_out` is non-null it receives `au_count`
/// bytes, 1 where the probability is at least `threshold`.
///
/// # Safety
/// `model` must be a live handle; `pixels` must point to `stride * height`
/// readable bytes; the output buffers must be writable for the lengths above.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cjcrf_detect(
    model: *const CjcrfModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    stride: usize,
    face_box: CjcrfBox,
    threshold: f64,
    landmarks_out: *mut f64,
    probs_out: *mut f64,
    labels_out: *mut u8,
) -> CjcrfStatus {
    guard(|| {
        // SAFETY: null or live per the contract above.
        let model = &unsafe { model.as_ref() }
            .ok_or_else(|| null("model"))?
            .inner;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if landmarks_out.is_null() || probs_out.is_null() {
            return Err(null("output buffer"));
        }
        if width == 0 || height == 0 || stride < width {
            return Err((
                CjcrfStatus::InvalidArgument,
                format!("invalid image geometry {width}x{height}, stride {stride}"),
            ));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err((
                CjcrfStatus::InvalidArgument,
                format!("threshold must lie in (0, 1), got {threshold}"),
            ));
        }
        let len = stride
            .checked_mul(height)
            .ok_or_else(|| (CjcrfStatus::InvalidArgument, "image too large".to_string()))?;
        // SAFETY: `pixels` covers stride * height bytes per the contract above.
        let raw = unsafe { std::slice::from_raw_parts(pixels, len) };
        let values = raw
            .chunks_exact(stride)
            .flat_map(|row| row[..width].iter().map(|&b| f64::from(b) / 255.0))
            .collect();
        let image = GrayImage::new(width, height, values).map_err(fail)?;
        let b = FaceBox::new(face_box.left, face_box.top, face_box.width, face_box.height)
            .map_err(fail)?;
        let det = infer(&image, &b, model).map_err(fail)?;

        let coords = det.shape.to_flat();
        // SAFETY: output buffers are writable for these lengths per the contract.
        unsafe {
            std::slice::from_raw_parts_mut(landmarks_out, coords.len()).copy_from_slice(&coords);
            let probs = det.probs.as_slice();
            std::slice::from_raw_parts_mut(probs_out, probs.len()).copy_from_slice(probs);
            if !labels_out.is_null() {
                let labels = det.probs.threshold(threshold);
                std::slice::from_raw_parts_mut(labels_out, labels.len())
                    .copy_from_slice(labels.as_slice());
            }
        }
        Ok(())
    })
}

/// Message for the most recent failure on this thread, or null when the last
/// call succeeded. The pointer stays valid until the next call into this
/// library on the same thread.
#[no_mangle]
pub extern "C" fn cjcrf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cjcrf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
