use std::ffi::{CStr, CString};
use std::ptr;

use vocspoof::audio::Waveform;
use vocspoof::cm::{cm_score, CMModel};
use vocspoof::sslcore::{EncoderConfig, EncoderParams};
use vocspoof_ffi::*;

fn small_encoder(seed: u64) -> EncoderParams {
    let cfg = EncoderConfig {
        dim: 8,
        blocks: 1,
        heads: 2,
        ff_mult: 2,
        conv_channels: 4,
    };
    EncoderParams::init(cfg, seed).unwrap()
}

fn tone(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect()
}

fn last_error() -> String {
    let p = vs_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn distillation_loss_hand_case() {
    let (x, xt, z) = ([1.0, 2.0], [0.0, 4.0], [0.0, 0.0]);
    let mut out = 0.0;
    let s = unsafe { vs_distillation_loss(x.as_ptr(), xt.as_ptr(), z.as_ptr(), 1, 2, &mut out) };
    assert_eq!(s, VsStatus::Ok);
    assert_eq!(out, 3.0);
}

#[test]
fn distillation_loss_rejects_bad_arguments() {
    let x = [1.0];
    let mut out = 0.0;
    let s = unsafe { vs_distillation_loss(x.as_ptr(), ptr::null(), x.as_ptr(), 1, 1, &mut out) };
    assert_eq!(s, VsStatus::NullPointer);
    assert!(last_error().contains("x_tilde"));
    let s = unsafe { vs_distillation_loss(x.as_ptr(), x.as_ptr(), x.as_ptr(), 0, 1, &mut out) };
    assert_eq!(s, VsStatus::InvalidArgument);
}

#[test]
fn eer_of_separated_and_interleaved_scores() {
    let (mut eer, mut thr) = (f64::NAN, f64::NAN);
    let bona = [0.9, 0.8, 0.7];
    let spoof = [0.1, 0.2];
    let s = unsafe { vs_compute_eer(bona.as_ptr(), 3, spoof.as_ptr(), 2, &mut eer, &mut thr) };
    assert_eq!(s, VsStatus::Ok);
    assert_eq!(eer, 0.0);
    let bona = [0.2, 0.4];
    let spoof = [0.3, 0.1];
    let s = unsafe { vs_compute_eer(bona.as_ptr(), 2, spoof.as_ptr(), 2, &mut eer, &mut thr) };
    assert_eq!(s, VsStatus::Ok);
    assert!((eer - 0.5).abs() < 1e-12, "{eer}");
    let s = unsafe { vs_compute_eer(bona.as_ptr(), 2, ptr::null(), 0, &mut eer, &mut thr) };
    assert_eq!(s, VsStatus::InvalidArgument);
}

#[test]
fn encoder_handle_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.safetensors");
    let enc = small_encoder(3);
    enc.save(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut VsEncoder = ptr::null_mut();
    assert_eq!(unsafe { vs_encoder_load(c.as_ptr(), &mut h) }, VsStatus::Ok);
    assert_eq!(unsafe { vs_encoder_dim(h) }, 8);

    let samples = tone(1600);
    let frames = vs_num_frames(samples.len());
    assert_eq!(frames, 5);
    let mut buf = vec![0.0; frames * 8];
    let mut got = 0usize;
    let s = unsafe { vs_encoder_encode(h, samples.as_ptr(), samples.len(), buf.as_mut_ptr(), buf.len(), &mut got) };
    assert_eq!(s, VsStatus::Ok);
    assert_eq!(got, frames);
    let want = enc.encode(&Waveform::new("w", samples.clone())).unwrap();
    assert_eq!(buf, want.values.iter().copied().collect::<Vec<_>>());

    let s = unsafe { vs_encoder_encode(h, samples.as_ptr(), samples.len(), buf.as_mut_ptr(), 3, &mut got) };
    assert_eq!(s, VsStatus::InvalidArgument);
    let short = tone(100);
    let s = unsafe { vs_encoder_encode(h, short.as_ptr(), short.len(), buf.as_mut_ptr(), buf.len(), &mut got) };
    assert_eq!(s, VsStatus::InvalidArgument);
    unsafe { vs_encoder_free(h) };
    unsafe { vs_encoder_free(ptr::null_mut()) };
}

#[test]
fn cm_handle_scores_like_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cm.safetensors");
    let model = CMModel::dual_diff(small_encoder(1), small_encoder(2), 5).unwrap();
    model.save(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut VsCm = ptr::null_mut();
    assert_eq!(unsafe { vs_cm_load(c.as_ptr(), &mut h) }, VsStatus::Ok);
    let samples = tone(3200);
    let mut score = f64::NAN;
    assert_eq!(unsafe { vs_cm_score(h, samples.as_ptr(), samples.len(), &mut score) }, VsStatus::Ok);
    assert_eq!(score, cm_score(&model, &Waveform::new("w", samples)).unwrap());
    unsafe { vs_cm_free(h) };
}

#[test]
fn load_errors_report_codes_and_messages() {
    let missing = CString::new("/nonexistent/enc.safetensors").unwrap();
    let mut h: *mut VsEncoder = ptr::null_mut();
    assert_eq!(unsafe { vs_encoder_load(missing.as_ptr(), &mut h) }, VsStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("/nonexistent/enc.safetensors"));
    assert_eq!(unsafe { vs_encoder_load(ptr::null(), &mut h) }, VsStatus::NullPointer);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.safetensors");
    std::fs::write(&junk, b"not a tensor file").unwrap();
    let c = CString::new(junk.to_str().unwrap()).unwrap();
    let mut cm: *mut VsCm = ptr::null_mut();
    assert_eq!(unsafe { vs_cm_load(c.as_ptr(), &mut cm) }, VsStatus::Format);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vocspoof.h")).unwrap();
    for f in [
        "vs_last_error",
        "vs_num_frames",
        "vs_encoder_load",
        "vs_encoder_free",
        "vs_encoder_dim",
        "vs_encoder_encode",
        "vs_cm_load",
        "vs_cm_free",
        "vs_cm_score",
        "vs_compute_eer",
        "vs_distillation_loss",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct VsEncoder VsEncoder;"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/vocspoof.h");
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
