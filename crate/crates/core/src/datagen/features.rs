//! Log-mel spectrogram and autocorrelation F0 extraction.

use ndarray::Array2;

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::dsp::{frame_count, mel_filterbank, Stft};
use crate::error::{Error, Result};

/// Floor added before the log so silence maps to `ln(1e-10)` rather than `-inf`.
pub const LOG_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatConfig {
    /// Analysis window in samples (25 ms).
    pub window: usize,
    /// Hop in samples (10 ms).
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f0: bool,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Normalized autocorrelation needed to call a frame voiced.
    pub voicing_threshold: f64,
}

impl Default for FeatConfig {
    fn default() -> Self {
        Self {
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            f0: true,
            f0_min: 50.0,
            f0_max: 500.0,
            voicing_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatures {
    /// `frames x n_mels` log mel energies.
    pub mel: Array2<f64>,
    /// Per-frame F0 in Hz, 0 when unvoiced.
    pub f0: Option<Vec<f64>>,
    /// Seconds.
    pub frame_shift: f64,
    pub source_id: String,
    /// Samples in the analysed waveform.
    pub num_samples: usize,
    pub config: FeatConfig,
}

impl AcousticFeatures {
    pub fn frames(&self) -> usize {
        self.mel.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let expect = frame_count(self.num_samples, self.config.window, self.config.hop);
        if self.mel.nrows() != expect || self.mel.ncols() != self.config.n_mels {
            return Err(Error::input(format!(
                "{}: mel shape {:?}, expected ({expect}, {})",
                self.source_id,
                self.mel.dim(),
                self.config.n_mels
            )));
        }
        if self.mel.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("{}: non-finite mel", self.source_id)));
        }
        if let Some(f0) = &self.f0 {
            if f0.len() != expect {
                return Err(Error::input(format!(
                    "{}: f0 has {} frames, mel has {expect}",
                    self.source_id,
                    f0.len()
                )));
            }
            if let Some(v) = f0.iter().find(|&&v| v != 0.0 && !(50.0..=500.0).contains(&v)) {
                return Err(Error::input(format!("{}: f0 value {v} out of range", self.source_id)));
            }
        }
        Ok(())
    }
}

pub fn extract_features(w: &Waveform, cfg: &FeatConfig) -> Result<AcousticFeatures> {
    if w.samples.len() < cfg.window {
        return Err(Error::input(format!(
            "{}: {} samples is shorter than one {}-sample analysis window",
            w.id,
            w.samples.len(),
            cfg.window
        )));
    }
    let stft = Stft::new(cfg.window, cfg.hop, cfg.n_fft);
    let power = stft.power(&w.samples);
    let fb = mel_filterbank(SAMPLE_RATE, cfg.n_fft, cfg.n_mels);
    let mel = power.dot(&fb.t()).mapv(|v| (v + LOG_EPS).ln());
    let f0 = cfg.f0.then(|| f0_track(&w.samples, cfg));
    Ok(AcousticFeatures {
        mel,
        f0,
        frame_shift: cfg.hop as f64 / SAMPLE_RATE as f64,
        source_id: w.id.clone(),
        num_samples: w.samples.len(),
        config: cfg.clone(),
    })
}

/// Normalized autocorrelation of `seg` at `lag`.
fn nacf(seg: &[f64], lag: usize) -> f64 {
    let n = seg.len() - lag;
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let a = seg[i];
        let b = seg[i + lag];
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx <= 0.0 || yy <= 0.0 {
        0.0
    } else {
        xy / (xx * yy).sqrt()
    }
}

fn frame_f0(seg: &[f64], cfg: &FeatConfig) -> f64 {
    let sr = SAMPLE_RATE as f64;
    let mean = seg.iter().sum::<f64>() / seg.len() as f64;
    let x: Vec<f64> = seg.iter().map(|s| s - mean).collect();
    let energy = x.iter().map(|s| s * s).sum::<f64>() / x.len() as f64;
    if energy < 1e-8 {
        return 0.0;
    }
    let lag_min = (sr / cfg.f0_max).ceil() as usize;
    let lag_max = ((sr / cfg.f0_min).floor() as usize).min(x.len() - 2);
    if lag_min + 1 >= lag_max {
        return 0.0;
    }
    let r: Vec<f64> = (lag_min - 1..=lag_max + 1).map(|l| nacf(&x, l)).collect();
    // r[i] is lag (lag_min - 1 + i)
    let rmax = r[1..r.len() - 1].iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if rmax < cfg.voicing_threshold {
        return 0.0;
    }
    // Smallest-lag local maximum close to the global one suppresses octave errors.
    let pick = (1..r.len() - 1)
        .find(|&i| r[i] >= 0.85 * rmax && r[i] >= r[i - 1] && r[i] >= r[i + 1])
        .unwrap_or(1);
    let (a, b, c) = (r[pick - 1], r[pick], r[pick + 1]);
    let denom = a - 2.0 * b + c;
    let offset = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let lag = (lag_min - 1 + pick) as f64 + offset;
    let f0 = sr / lag;
    if (cfg.f0_min..=cfg.f0_max).contains(&f0) {
        f0
    } else {
        0.0
    }
}

fn f0_track(x: &[f64], cfg: &FeatConfig) -> Vec<f64> {
    let frames = frame_count(x.len(), cfg.window, cfg.hop);
    (0..frames)
        .map(|f| frame_f0(&x[f * cfg.hop..f * cfg.hop + cfg.window], cfg))
        .collect()
}
