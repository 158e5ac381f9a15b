//! STFT / inverse STFT and the mel filterbank shared by feature extraction and the vocoders.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Number of full analysis frames; no centering or padding.
pub fn frame_count(num_samples: usize, window: usize, hop: usize) -> usize {
    if num_samples < window {
        0
    } else {
        (num_samples - window) / hop + 1
    }
}

pub struct Stft {
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    win: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(window: usize, hop: usize, n_fft: usize) -> Self {
        assert!(window <= n_fft, "window {window} > n_fft {n_fft}");
        let mut planner = FftPlanner::new();
        Self {
            window,
            hop,
            n_fft,
            win: hann(window),
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Complex spectra, `frames x (n_fft/2 + 1)`.
    pub fn forward(&self, x: &[f64]) -> Array2<Complex64> {
        let frames = frame_count(x.len(), self.window, self.hop);
        let bins = self.n_bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            let start = f * self.hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (n, (b, &w)) in buf.iter_mut().zip(&self.win).enumerate() {
                *b = Complex64::new(x[start + n] * w, 0.0);
            }
            self.fwd.process(&mut buf);
            for k in 0..bins {
                out[[f, k]] = buf[k];
            }
        }
        out
    }

    /// Power spectrogram `|X|^2`.
    pub fn power(&self, x: &[f64]) -> Array2<f64> {
        self.forward(x).mapv(|c| c.norm_sqr())
    }

    /// Weighted overlap-add inverse; output length `(frames - 1) * hop + window`.
    pub fn inverse(&self, spec: &Array2<Complex64>) -> Vec<f64> {
        let frames = spec.nrows();
        if frames == 0 {
            return Vec::new();
        }
        let len = (frames - 1) * self.hop + self.window;
        let mut y = vec![0.0; len];
        let mut wsum = vec![0.0; len];
        let bins = self.n_bins();
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            for k in 0..bins {
                buf[k] = spec[[f, k]];
            }
            // Hermitian mirror for a real signal.
            for k in bins..self.n_fft {
                buf[k] = spec[[f, self.n_fft - k]].conj();
            }
            buf[0].im = 0.0;
            if self.n_fft % 2 == 0 {
                buf[self.n_fft / 2].im = 0.0;
            }
            self.inv.process(&mut buf);
            let start = f * self.hop;
            let scale = 1.0 / self.n_fft as f64;
            for n in 0..self.window {
                let w = self.win[n];
                y[start + n] += buf[n].re * scale * w;
                wsum[start + n] += w * w;
            }
        }
        // Floor the normalizer at 10% of its steady-state value; edges are attenuated
        // instead of amplified.
        let steady: f64 = self.win.iter().map(|w| w * w).sum::<f64>() / self.hop as f64;
        let floor = 0.1 * steady;
        for (s, &w) in y.iter_mut().zip(&wsum) {
            *s /= w.max(floor);
        }
        y
    }
}

fn hz_to_mel(f: f64) -> f64 {
    // Slaney scale: linear below 1 kHz, logarithmic above.
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f < MIN_LOG_HZ {
        f / F_SP
    } else {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m < min_log_mel {
        F_SP * m
    } else {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    }
}

/// Slaney-normalized triangular mel filterbank, `n_mels x (n_fft/2 + 1)`, spanning 0 Hz to Nyquist.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Array2<f64> {
    let bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(nyquist);
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        let enorm = 2.0 / (r - l);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            let w = up.min(down).max(0.0);
            fb[[m, k]] = w * enorm;
        }
    }
    fb
}

/// Index of the largest magnitude bin of a zero-padded real FFT of `x`, and the bin spacing in Hz.
pub fn spectral_peak(x: &[f64], sample_rate: u32) -> (usize, f64) {
    let n = x.len().next_power_of_two();
    let mut buf: Vec<Complex64> = x.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (peak, _) = buf[1..n / 2]
        .iter()
        .enumerate()
        .fold((0, 0.0), |(bi, bv), (i, c)| {
            let v = c.norm_sqr();
            if v > bv {
                (i + 1, v)
            } else {
                (bi, bv)
            }
        });
    (peak, sample_rate as f64 / n as f64)
}
