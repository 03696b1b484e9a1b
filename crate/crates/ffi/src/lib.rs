//! C ABI over the separation library.
//!
//! Every fallible function returns an [`AvsepStatus`]; on failure a message is
//! available from [`avsep_last_error`] on the same thread. Models are opaque
//! handles created by [`avsep_model_load`] and released by [`avsep_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use avsep::checkpoint::load_checkpoint;
use avsep::losses::{si_sdr_slices, SiSdrOptions};
use avsep::nn::Parameterized;
use avsep::{AvSepNet, Error, VisualFeatures, Waveform};
use ndarray::Array3;

/// Result codes shared with the command-line exit status.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AvsepStatus {
    Ok = 0,
    InvalidInput = 2,
    Config = 3,
    Format = 4,
    Data = 5,
    Version = 6,
    Io = 7,
    NullPointer = 8,
    Panic = 9,
}

/// Opaque separation model.
pub struct AvsepModel {
    net: AvSepNet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AvsepStatus {
    match e {
        Error::InvalidInput(_) => AvsepStatus::InvalidInput,
        Error::Config(_) => AvsepStatus::Config,
        Error::Format(_) => AvsepStatus::Format,
        Error::Data(_) => AvsepStatus::Data,
        Error::Version(_) => AvsepStatus::Version,
        Error::Io { .. } => AvsepStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), AvsepStatus>) -> AvsepStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AvsepStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            AvsepStatus::Panic
        }
    }
}

fn fail(e: Error) -> AvsepStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> AvsepStatus {
    set_error(format!("null pointer: {what}"));
    AvsepStatus::NullPointer
}

/// Message describing the most recent failure on this thread, or null.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn avsep_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint into a new model handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avsep_model_load(path: *const c_char, out: *mut *mut AvsepModel) -> AvsepStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(Error::InvalidInput("path is not UTF-8".into())))?;
        let net = load_checkpoint(path).map_err(fail)?;
        *out = Box::into_raw(Box::new(AvsepModel { net }));
        Ok(())
    })
}

/// Releases a handle from [`avsep_model_load`]; null is ignored.
///
/// # Safety
/// `model` must come from [`avsep_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn avsep_model_free(model: *mut AvsepModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total number of trainable parameters.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avsep_model_num_params(model: *const AvsepModel, out: *mut u64) -> AvsepStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.net.num_params() as u64;
        Ok(())
    })
}

/// Sample rate the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avsep_model_sample_rate(model: *const AvsepModel, out: *mut u32) -> AvsepStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.net.config().sample_rate;
        Ok(())
    })
}

/// Separates `mix` (`len` samples at `sample_rate`) into `n_speakers` streams.
///
/// `visual` holds `n_visual` row-major tracks of `frames x dim` floats for the
/// guided speakers (may be null when `n_visual` is 0). `out` receives
/// `n_speakers * len` samples, guided streams first.
///
/// # Safety
/// All pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn avsep_model_separate(
    model: *const AvsepModel,
    mix: *const f64,
    len: usize,
    sample_rate: u32,
    visual: *const f32,
    n_visual: usize,
    frames: usize,
    dim: usize,
    n_speakers: usize,
    out: *mut f64,
) -> AvsepStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if mix.is_null() {
            return Err(null("mix"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if n_visual > n_speakers {
            return Err(fail(Error::InvalidInput(format!("{n_visual} visual tracks for {n_speakers} speakers"))));
        }
        let cfg = m.net.config();
        let samples = std::slice::from_raw_parts(mix, len).to_vec();
        let wave = Waveform::new(samples, sample_rate).map_err(fail)?;
        let v = if n_visual == 0 {
            VisualFeatures::absent(n_speakers, frames, dim, cfg.fps)
        } else {
            if visual.is_null() {
                return Err(null("visual"));
            }
            let vals = std::slice::from_raw_parts(visual, n_visual * frames * dim).to_vec();
            let data = Array3::from_shape_vec((n_visual, frames, dim), vals).expect("length matches shape");
            let present = (0..n_speakers).map(|i| i < n_visual).collect();
            VisualFeatures::new(data, cfg.fps, present).map_err(fail)?
        };
        let est = m.net.separate(&wave, &v, n_speakers).map_err(fail)?;
        let dst = std::slice::from_raw_parts_mut(out, n_speakers * len);
        for (chunk, w) in dst.chunks_exact_mut(len.max(1)).zip(&est) {
            chunk.copy_from_slice(w.samples());
        }
        Ok(())
    })
}

/// SI-SDR in dB of `est` against `reference`, both `len` samples.
///
/// # Safety
/// `est` and `reference` must hold `len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn avsep_si_sdr(est: *const f64, reference: *const f64, len: usize, out: *mut f64) -> AvsepStatus {
    guard(|| {
        if est.is_null() || reference.is_null() || out.is_null() {
            return Err(null("est, reference or out"));
        }
        let e = std::slice::from_raw_parts(est, len);
        let r = std::slice::from_raw_parts(reference, len);
        *out = si_sdr_slices(e, r, SiSdrOptions::default()).map_err(fail)?;
        Ok(())
    })
}
