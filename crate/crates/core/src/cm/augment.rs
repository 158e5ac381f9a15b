//! Seeded convolutive coloration plus additive noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugConfig {
    /// Filter taps after the leading unit tap.
    pub fir_order: usize,
    /// Each extra tap is drawn from `[-max_tap, max_tap]`.
    pub max_tap: f64,
    pub snr_db: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            fir_order: 3,
            max_tap: 0.3,
            snr_db: (10.0, 30.0),
        }
    }
}

/// The random draws behind one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugDraw {
    pub taps: Vec<f64>,
    pub snr_db: f64,
    /// The clean signal after filtering, before noise and clipping.
    pub colored: Vec<f64>,
}

pub fn augment(w: &Waveform, cfg: &AugConfig, seed: u64) -> Result<Waveform> {
    augment_with_draw(w, cfg, seed).map(|(w, _)| w)
}

pub fn augment_with_draw(w: &Waveform, cfg: &AugConfig, seed: u64) -> Result<(Waveform, AugDraw)> {
    w.validate()?;
    if !(cfg.snr_db.0 <= cfg.snr_db.1) {
        return Err(Error::config("snr_db", "lower bound exceeds upper bound"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taps = vec![1.0];
    taps.extend((0..cfg.fir_order).map(|_| rng.random_range(-cfg.max_tap..=cfg.max_tap)));
    let snr_db = if cfg.snr_db.0 == cfg.snr_db.1 {
        cfg.snr_db.0
    } else {
        rng.random_range(cfg.snr_db.0..cfg.snr_db.1)
    };
    let x = &w.samples;
    let colored: Vec<f64> = (0..x.len())
        .map(|n| {
            taps.iter()
                .enumerate()
                .take(n + 1)
                .map(|(k, h)| h * x[n - k])
                .sum()
        })
        .collect();
    let noise: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
    let p_sig = colored.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let p_noise = noise.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    // Scale the realized noise so the clean/noise power ratio is exactly the drawn SNR.
    let gain = if p_noise > 0.0 {
        (p_sig / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt()
    } else {
        0.0
    };
    let samples = colored
        .iter()
        .zip(&noise)
        .map(|(c, n)| (c + gain * n).clamp(-1.0, 1.0))
        .collect();
    Ok((
        Waveform::new(w.id.clone(), samples),
        AugDraw {
            taps,
            snr_db,
            colored,
        },
    ))
}
