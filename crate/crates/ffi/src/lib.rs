//! C interface to trained checkpoints.
//!
//! Every function returns an [`LmdetStatus`]; on failure a description is
//! available from [`lmdet_last_error`] on the same thread until the next
//! call. Handles come from [`lmdet_model_load`] and must be released with
//! [`lmdet_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lmdet::checkpoint::{stored_precision, Checkpoint};
use lmdet::data::LandmarkSet;
use lmdet::{Error, Model, Precision, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmdetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Dimension = 5,
    Numerical = 6,
    DegenerateNormalization = 7,
    Internal = 8,
}

impl From<&Error> for LmdetStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } => LmdetStatus::Config,
            Error::Io { .. } => LmdetStatus::Io,
            Error::Dimension { .. } => LmdetStatus::Dimension,
            Error::NumericalAbort { .. } => LmdetStatus::Numerical,
            Error::DegenerateNormalization => LmdetStatus::DegenerateNormalization,
            Error::Contract(_) => LmdetStatus::InvalidArgument,
        }
    }
}

enum Inner {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// A loaded checkpoint.
pub struct LmdetModel {
    inner: Inner,
}

impl LmdetModel {
    fn config(&self) -> &lmdet::config::ModelConfig {
        match &self.inner {
            Inner::F32(m) => m.config(),
            Inner::F64(m) => m.config(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: LmdetStatus, msg: impl Into<String>) -> LmdetStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), LmdetStatus>) -> LmdetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LmdetStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(LmdetStatus::Internal, "internal panic"),
    }
}

fn lift<T>(r: lmdet::Result<T>) -> Result<T, LmdetStatus> {
    r.map_err(|e| fail(LmdetStatus::from(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), LmdetStatus> {
    if p.is_null() {
        Err(fail(LmdetStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn lmdet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads the checkpoint directory `path` at its stored precision.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lmdet_model_load(path: *const c_char, out: *mut *mut LmdetModel) -> LmdetStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        // SAFETY: checked non-null; the caller promises nul termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(LmdetStatus::InvalidArgument, "path is not UTF-8"))?;
        let dir = Path::new(path);
        let inner = match lift(stored_precision(dir))? {
            Precision::F32 => Inner::F32(lift(Checkpoint::<f32>::load(dir))?.model),
            Precision::F64 => Inner::F64(lift(Checkpoint::<f64>::load(dir))?.model),
        };
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(LmdetModel { inner })) };
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`lmdet_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lmdet_model_free(model: *mut LmdetModel) {
    if !model.is_null() {
        // SAFETY: the caller passes ownership of a pointer from Box::into_raw.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Landmark count N, image side and channel count of the model. Any output
/// pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmdet_model_shape(
    model: *const LmdetModel,
    num_landmarks: *mut usize,
    image_size: *mut usize,
    in_channels: *mut usize,
) -> LmdetStatus {
    guard(|| {
        non_null(model, "model")?;
        // SAFETY: checked non-null; the caller promises a live handle.
        let cfg = unsafe { &*model }.config();
        for (p, v) in [
            (num_landmarks, cfg.num_landmarks),
            (image_size, cfg.image_size),
            (in_channels, cfg.in_channels),
        ] {
            if !p.is_null() {
                // SAFETY: non-null outputs are writable per the contract.
                unsafe { *p = v };
            }
        }
        Ok(())
    })
}

/// Predicts landmarks for one image.
///
/// `pixels` holds `in_channels · image_size²` values, channel-major then
/// row-major. `out` receives `2N` values `x0, y0, x1, y1, …` as fractions of
/// the image side.
///
/// # Safety
/// `pixels` must be readable for `pixel_count` floats and `out` writable for
/// `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lmdet_model_predict(
    model: *const LmdetModel,
    pixels: *const f32,
    pixel_count: usize,
    out: *mut f64,
    out_len: usize,
) -> LmdetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(pixels, "pixels")?;
        non_null(out, "out")?;
        // SAFETY: checked non-null; the caller promises a live handle.
        let model = unsafe { &*model };
        let cfg = model.config();
        let shape = [cfg.in_channels, cfg.image_size, cfg.image_size];
        let want = shape.iter().product::<usize>();
        if pixel_count != want {
            return Err(fail(
                LmdetStatus::Dimension,
                format!("expected {want} pixels, got {pixel_count}"),
            ));
        }
        if out_len != 2 * cfg.num_landmarks {
            return Err(fail(
                LmdetStatus::Dimension,
                format!("output holds {out_len} values, model predicts {}", 2 * cfg.num_landmarks),
            ));
        }
        // SAFETY: length checked against the caller's stated extent.
        let data = unsafe { std::slice::from_raw_parts(pixels, pixel_count) }.to_vec();
        let image = lift(Tensor::new(&shape, data))?;
        let coords: Vec<f64> = match &model.inner {
            Inner::F32(m) => lift(m.predict(&image))?.data().iter().map(|&v| v as f64).collect(),
            Inner::F64(m) => lift(m.predict(&image.cast()))?.data().to_vec(),
        };
        // SAFETY: out_len equals coords.len() and the caller promises it is writable.
        unsafe { std::slice::from_raw_parts_mut(out, out_len) }.copy_from_slice(&coords);
        Ok(())
    })
}

/// Normalized mean error of `pred` against `gt` (each `2N` values
/// `x0, y0, …`), divided by the distance between ground-truth landmarks
/// `left_eye` and `right_eye`. Written to `out` as a fraction, not percent.
///
/// # Safety
/// `pred` and `gt` must be readable for `2 · num_landmarks` doubles and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lmdet_nme(
    pred: *const f64,
    gt: *const f64,
    num_landmarks: usize,
    left_eye: usize,
    right_eye: usize,
    out: *mut f64,
) -> LmdetStatus {
    guard(|| {
        non_null(pred, "pred")?;
        non_null(gt, "gt")?;
        non_null(out, "out")?;
        if num_landmarks == 0 || left_eye >= num_landmarks || right_eye >= num_landmarks {
            return Err(fail(
                LmdetStatus::InvalidArgument,
                format!("eye indices ({left_eye}, {right_eye}) out of range for {num_landmarks} landmarks"),
            ));
        }
        let read = |p: *const f64| {
            // SAFETY: the caller promises 2N readable values.
            let v = unsafe { std::slice::from_raw_parts(p, 2 * num_landmarks) };
            LandmarkSet::new(v.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
        };
        let value = lift(lmdet::metrics::nme(&read(pred), &read(gt), (left_eye, right_eye)))?;
        // SAFETY: checked non-null.
        unsafe { *out = value };
        Ok(())
    })
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn lmdet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
