//! C ABI over `vocspoof`: encoder and countermeasure handles, EER, and the distillation loss.
//!
//! Every function returns a [`VsStatus`]. On failure the message is available from
//! [`vs_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::Array2;
use vocspoof::audio::Waveform;
use vocspoof::cm::{cm_score, CMModel};
use vocspoof::distill::distillation_loss;
use vocspoof::eval::{compute_eer, ScoreRecord};
use vocspoof::manifest::Label;
use vocspoof::sslcore::{num_frames, EncoderParams, FeatureSequence};
use vocspoof::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NonFinite = 5,
    Internal = 6,
}

/// Pretrained, continually trained or student encoder.
pub struct VsEncoder(EncoderParams);

/// Trained countermeasure.
pub struct VsCm(CMModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VsStatus {
    match e {
        Error::Config { .. } | Error::Input(_) => VsStatus::InvalidArgument,
        Error::Io { .. } | Error::MissingStage { .. } => VsStatus::Io,
        Error::Format { .. } => VsStatus::Format,
        Error::NonFinite { .. } => VsStatus::NonFinite,
        Error::Stage { source, .. } | Error::Round { source, .. } => status_of(source),
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VsStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            VsStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            VsStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::input("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

/// Last error message on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn vs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frames produced for an input of `num_samples` samples.
#[no_mangle]
pub extern "C" fn vs_num_frames(num_samples: usize) -> usize {
    num_frames(num_samples)
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_encoder_load(path: *const c_char, out: *mut *mut VsEncoder) -> VsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let enc = EncoderParams::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VsEncoder(enc)));
        Ok(())
    })
}

/// # Safety
/// `enc` must come from [`vs_encoder_load`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn vs_encoder_free(enc: *mut VsEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `enc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_encoder_dim(enc: *const VsEncoder) -> usize {
    enc.as_ref().map_or(0, |e| e.0.config.dim)
}

/// Encodes 16 kHz samples into `out`, row-major `frames x dim`.
/// `out_len` must be at least `vs_num_frames(n) * dim`.
///
/// # Safety
/// `samples` must point to `n` values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn vs_encoder_encode(
    enc: *const VsEncoder,
    samples: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
    out_frames: *mut usize,
) -> VsStatus {
    guard(|| {
        let enc = enc.as_ref().ok_or(Fail::Null("enc"))?;
        let frames_out = out_arg(out_frames, "out_frames")?;
        let w = Waveform::new("ffi", slice_arg(samples, n, "samples")?.to_vec());
        let f = enc.0.encode(&w)?;
        let (frames, dim) = f.shape();
        if out_len < frames * dim {
            return Err(Error::input(format!("output buffer holds {out_len} values, need {}", frames * dim)).into());
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let dst = std::slice::from_raw_parts_mut(out, frames * dim);
        for (d, s) in dst.iter_mut().zip(f.values.iter()) {
            *d = *s;
        }
        *frames_out = frames;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_cm_load(path: *const c_char, out: *mut *mut VsCm) -> VsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cm = CMModel::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VsCm(cm)));
        Ok(())
    })
}

/// # Safety
/// `cm` must come from [`vs_cm_load`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn vs_cm_free(cm: *mut VsCm) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}

/// Bona fide score of one utterance; higher means more likely bona fide.
///
/// # Safety
/// `samples` must point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn vs_cm_score(cm: *const VsCm, samples: *const f64, n: usize, out: *mut f64) -> VsStatus {
    guard(|| {
        let cm = cm.as_ref().ok_or(Fail::Null("cm"))?;
        let out = out_arg(out, "out")?;
        let w = Waveform::new("ffi", slice_arg(samples, n, "samples")?.to_vec());
        *out = cm_score(&cm.0, &w)?;
        Ok(())
    })
}

/// Equal error rate (fraction) and its threshold.
///
/// # Safety
/// `bona` and `spoof` must point to `n_bona` and `n_spoof` values.
#[no_mangle]
pub unsafe extern "C" fn vs_compute_eer(
    bona: *const f64,
    n_bona: usize,
    spoof: *const f64,
    n_spoof: usize,
    out_eer: *mut f64,
    out_threshold: *mut f64,
) -> VsStatus {
    guard(|| {
        let bona = slice_arg(bona, n_bona, "bona")?;
        let spoof = slice_arg(spoof, n_spoof, "spoof")?;
        let eer_out = out_arg(out_eer, "out_eer")?;
        let thr_out = out_arg(out_threshold, "out_threshold")?;
        let rec = |(i, &score): (usize, &f64), label| ScoreRecord {
            id: format!("{i}"),
            set_name: "ffi".into(),
            label,
            score,
        };
        let records: Vec<ScoreRecord> = bona
            .iter()
            .enumerate()
            .map(|p| rec(p, Label::Bonafide))
            .chain(spoof.iter().enumerate().map(|p| rec(p, Label::Spoof)))
            .collect();
        let r = compute_eer(&records)?;
        *eer_out = r.eer;
        *thr_out = r.threshold;
        Ok(())
    })
}

/// Mean over `n` frames of the L1 distance between `z` and `|x - x_tilde|`.
/// All three inputs are row-major `n x d`.
///
/// # Safety
/// `x`, `x_tilde` and `z` must each point to `n * d` values.
#[no_mangle]
pub unsafe extern "C" fn vs_distillation_loss(
    x: *const f64,
    x_tilde: *const f64,
    z: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
) -> VsStatus {
    guard(|| {
        if n == 0 || d == 0 {
            return Err(Error::input("n and d must be >= 1").into());
        }
        let out = out_arg(out, "out")?;
        let seq = |p, what| -> Result<FeatureSequence, Fail> {
            let v = slice_arg(p, n * d, what)?.to_vec();
            let m = Array2::from_shape_vec((n, d), v).map_err(|e| Error::input(e.to_string()))?;
            Ok(FeatureSequence::new(what, m))
        };
        *out = distillation_loss(&seq(x, "x")?, &seq(x_tilde, "x_tilde")?, &seq(z, "z")?)?;
        Ok(())
    })
}
