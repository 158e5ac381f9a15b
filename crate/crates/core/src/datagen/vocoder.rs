//! Deterministic copy-synthesis vocoders driven by [`AcousticFeatures`].
//!
//! * `griffin`: mel inversion to a linear power spectrogram (non-negative least squares by
//!   multiplicative updates), then 32 Griffin-Lim iterations from a seeded random phase.
//! * `harmnoise`: harmonic-plus-noise source-filter resynthesis. Harmonics of the F0 track are
//!   weighted by the mel envelope; a noise branch shaped by the same envelope dominates unvoiced
//!   frames.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rustfft::num_complex::Complex64;

use super::features::{AcousticFeatures, LOG_EPS};
use super::synth::item_rng;
use crate::audio::{peak_normalize, Waveform, PEAK_LEVEL, SAMPLE_RATE};
use crate::dsp::{mel_filterbank, Stft};
use crate::error::{Error, Result};

pub const GRIFFIN_ITERS: usize = 32;
const NNLS_ITERS: usize = 40;
/// Noise-branch amplitude in voiced frames relative to unvoiced ones.
const VOICED_NOISE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VocoderId {
    Griffin,
    HarmNoise,
}

impl VocoderId {
    pub fn as_str(self) -> &'static str {
        match self {
            VocoderId::Griffin => "griffin",
            VocoderId::HarmNoise => "harmnoise",
        }
    }

    pub fn all() -> [VocoderId; 2] {
        [VocoderId::Griffin, VocoderId::HarmNoise]
    }
}

impl fmt::Display for VocoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VocoderId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "griffin" => Ok(VocoderId::Griffin),
            "harmnoise" => Ok(VocoderId::HarmNoise),
            other => Err(Error::config("vocoder_id", format!("unknown vocoder `{other}`"))),
        }
    }
}

/// Resynthesizes a waveform from features. Output id is `<source>__<vocoder>`.
pub fn vocode(feat: &AcousticFeatures, vocoder: VocoderId, seed: u64) -> Result<Waveform> {
    feat.validate()?;
    let mut samples = match vocoder {
        VocoderId::Griffin => griffin(feat, seed),
        VocoderId::HarmNoise => {
            let f0 = feat.f0.as_ref().ok_or_else(|| {
                Error::input(format!("{}: harmnoise needs an f0 track", feat.source_id))
            })?;
            harmnoise(feat, f0, seed)
        }
    };
    // Guard against any numerical blow-up reaching the file.
    for s in samples.iter_mut() {
        if !s.is_finite() {
            *s = 0.0;
        }
    }
    peak_normalize(&mut samples, PEAK_LEVEL);
    Ok(Waveform::new(
        format!("{}__{}", feat.source_id, vocoder),
        samples,
    ))
}

/// Linear power spectrogram (`bins x frames`) whose mel projection matches the features.
fn mel_to_power(feat: &AcousticFeatures) -> Array2<f64> {
    let cfg = &feat.config;
    let fb = mel_filterbank(SAMPLE_RATE, cfg.n_fft, cfg.n_mels);
    let target = feat.mel.t().mapv(|v| (v.exp() - LOG_EPS).max(0.0));
    let fbt = fb.t();
    let numer = fbt.dot(&target);
    let gram = fbt.dot(&fb);
    let mut p = numer.clone();
    for _ in 0..NNLS_ITERS {
        let denom = gram.dot(&p);
        ndarray::Zip::from(&mut p)
            .and(&numer)
            .and(&denom)
            .for_each(|p, &n, &d| {
                *p = if d > 0.0 { *p * n / d } else { 0.0 };
            });
    }
    p
}

fn griffin(feat: &AcousticFeatures, seed: u64) -> Vec<f64> {
    let cfg = &feat.config;
    let stft = Stft::new(cfg.window, cfg.hop, cfg.n_fft);
    let mag = mel_to_power(feat).t().mapv(f64::sqrt);
    let mut rng = item_rng(seed, 0);
    let mut spec = mag.mapv(|m| Complex64::from_polar(m, rng.random_range(0.0..2.0 * PI)));
    for _ in 0..GRIFFIN_ITERS {
        let y = stft.inverse(&spec);
        let est = stft.forward(&y);
        ndarray::Zip::from(&mut spec)
            .and(&est)
            .and(&mag)
            .for_each(|s, e, &m| {
                let n = e.norm();
                *s = if n > 0.0 { e * (m / n) } else { Complex64::new(m, 0.0) };
            });
    }
    stft.inverse(&spec)
}

/// Interpolates a per-bin envelope at frequency `hz`.
fn env_at(env: ndarray::ArrayView1<f64>, hz: f64, bin_hz: f64) -> f64 {
    let pos = hz / bin_hz;
    let i = pos.floor() as usize;
    if i + 1 >= env.len() {
        return env[env.len() - 1];
    }
    let frac = pos - i as f64;
    env[i] * (1.0 - frac) + env[i + 1] * frac
}

fn harmnoise(feat: &AcousticFeatures, f0: &[f64], seed: u64) -> Vec<f64> {
    let cfg = &feat.config;
    let sr = SAMPLE_RATE as f64;
    let frames = feat.frames();
    let len = (frames - 1) * cfg.hop + cfg.window;
    let bin_hz = sr / cfg.n_fft as f64;

    // Smooth envelope: mean power per bin inside each mel band, spread back over the bins.
    let fb = mel_filterbank(SAMPLE_RATE, cfg.n_fft, cfg.n_mels);
    let band_w: Vec<f64> = fb.outer_iter().map(|r| r.sum()).collect();
    let density = Array2::from_shape_fn((frames, cfg.n_mels), |(f, m)| {
        (feat.mel[[f, m]].exp() - LOG_EPS).max(0.0) / band_w[m]
    });
    let bin_w = fb.sum_axis(ndarray::Axis(0));
    let mut env = density.dot(&fb);
    for mut row in env.outer_iter_mut() {
        row.zip_mut_with(&bin_w, |e, &w| *e = if w > 0.0 { *e / w } else { 0.0 });
    }

    // Harmonic branch. Amplitude per harmonic from the envelope:
    // A^2 = 4 E f0 / (sr * sum(w^2)) spreads one harmonic's energy over its f0-wide slot.
    let win_energy: f64 = crate::dsp::hann(cfg.window).iter().map(|w| w * w).sum();
    let center = |f: usize| (f * cfg.hop + cfg.window / 2) as f64;
    let voiced_f0: Vec<f64> = fill_unvoiced(f0);
    let max_h = (sr / 2.0 / 50.0) as usize;
    let mut amps = Array2::<f64>::zeros((frames, max_h));
    for f in 0..frames {
        if f0[f] <= 0.0 {
            continue;
        }
        let e = env.row(f);
        let mut k = 1;
        while (k as f64) * f0[f] < sr / 2.0 - 2.0 * bin_hz && k <= max_h {
            let p = env_at(e, k as f64 * f0[f], bin_hz);
            amps[[f, k - 1]] = (4.0 * p * f0[f] / (sr * win_energy)).sqrt();
            k += 1;
        }
    }
    let mut harm = vec![0.0; len];
    let mut phase = 0.0f64;
    for (t, h) in harm.iter_mut().enumerate() {
        let pos = t as f64;
        let (f_lo, frac) = if pos <= center(0) {
            (0, 0.0)
        } else if pos >= center(frames - 1) {
            (frames - 1, 0.0)
        } else {
            let i = ((pos - center(0)) / cfg.hop as f64).floor() as usize;
            (i, (pos - center(i)) / cfg.hop as f64)
        };
        let f_hi = (f_lo + 1).min(frames - 1);
        let cur_f0 = voiced_f0[f_lo] * (1.0 - frac) + voiced_f0[f_hi] * frac;
        if cur_f0 <= 0.0 {
            continue;
        }
        phase = (phase + 2.0 * PI * cur_f0 / sr) % (2.0 * PI);
        let mut acc = 0.0;
        for k in 0..max_h {
            let a = amps[[f_lo, k]] * (1.0 - frac) + amps[[f_hi, k]] * frac;
            if a == 0.0 && (k as f64 + 1.0) * cur_f0 >= sr / 2.0 {
                break;
            }
            acc += a * ((k as f64 + 1.0) * phase).sin();
        }
        *h = acc;
    }

    // Noise branch: envelope magnitude with seeded random phase.
    let stft = Stft::new(cfg.window, cfg.hop, cfg.n_fft);
    let mut rng = item_rng(seed, 1);
    let noise_spec = Array2::from_shape_fn((frames, stft.n_bins()), |(f, k)| {
        let g = if f0[f] > 0.0 { VOICED_NOISE } else { 1.0 };
        Complex64::from_polar(g * env[[f, k]].sqrt(), rng.random_range(0.0..2.0 * PI))
    });
    let noise = stft.inverse(&noise_spec);
    harm.iter().zip(&noise).map(|(h, n)| h + n).collect()
}

/// Replaces unvoiced zeros with the nearest voiced value so pitch never jumps to 0 mid-ramp.
fn fill_unvoiced(f0: &[f64]) -> Vec<f64> {
    let mut out = f0.to_vec();
    let mut last = f0.iter().copied().find(|&v| v > 0.0).unwrap_or(0.0);
    for v in out.iter_mut() {
        if *v > 0.0 {
            last = *v;
        } else {
            *v = last;
        }
    }
    out
}
