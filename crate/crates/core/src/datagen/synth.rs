//! Speech-like bona fide signals: a glottal-style harmonic source with a wandering pitch
//! contour, a few parallel formant resonators, syllabic voicing, and breath noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::{peak_normalize, Waveform, PEAK_LEVEL, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Synthesis "speaker pool". Different styles stand in for different corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthStyle {
    /// Main corpus.
    Default,
    /// Disjoint pool used to pretrain the second, independent encoder.
    Alt,
    /// Out-of-domain test pool.
    Shifted,
}

impl SynthStyle {
    pub fn name(self) -> &'static str {
        match self {
            SynthStyle::Default => "default",
            SynthStyle::Alt => "alt",
            SynthStyle::Shifted => "shifted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "default" => Some(SynthStyle::Default),
            "alt" => Some(SynthStyle::Alt),
            "shifted" => Some(SynthStyle::Shifted),
            _ => None,
        }
    }

    /// Fundamental frequency range in Hz.
    pub fn pitch_range(self) -> (f64, f64) {
        match self {
            SynthStyle::Default => (100.0, 220.0),
            SynthStyle::Alt => (150.0, 300.0),
            SynthStyle::Shifted => (85.0, 180.0),
        }
    }

    fn formant_ranges(self) -> [(f64, f64); 4] {
        match self {
            SynthStyle::Default => [(300.0, 800.0), (900.0, 2200.0), (2300.0, 3000.0), (3300.0, 4200.0)],
            SynthStyle::Alt => [(400.0, 1000.0), (1100.0, 2600.0), (2700.0, 3500.0), (3700.0, 4800.0)],
            SynthStyle::Shifted => [(250.0, 700.0), (800.0, 1900.0), (2100.0, 2800.0), (3000.0, 3900.0)],
        }
    }

    fn breath_level(self) -> f64 {
        match self {
            SynthStyle::Default => 0.01,
            SynthStyle::Alt => 0.006,
            SynthStyle::Shifted => 0.025,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_utts: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub style: SynthStyle,
    /// Prefix of generated utterance ids.
    pub id_prefix: String,
}

impl CorpusConfig {
    pub fn new(n_utts: usize, duration_s: f64, seed: u64) -> Self {
        Self {
            n_utts,
            duration_s,
            seed,
            style: SynthStyle::Default,
            id_prefix: "utt".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_utts < 1 {
            return Err(Error::config("n_utts", "must be >= 1"));
        }
        if !(0.5..=10.0).contains(&self.duration_s) {
            return Err(Error::config(
                "duration_s",
                format!("{} outside [0.5, 10]", self.duration_s),
            ));
        }
        if self.id_prefix.is_empty() || self.id_prefix.contains(['\t', '\n', '/']) {
            return Err(Error::config("id_prefix", "must be a non-empty plain token"));
        }
        Ok(())
    }

    pub fn utt_id(&self, index: usize) -> String {
        format!("{}{:05}", self.id_prefix, index)
    }
}

/// RNG for item `index` of a seeded collection; independent of generation order.
pub(crate) fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Constant 0 dB peak-gain band-pass biquad.
struct Resonator {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let mut r = Self {
            b0: 0.0,
            b2: 0.0,
            a1: 0.0,
            a2: 0.0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        };
        r.tune(freq, bandwidth);
        r
    }

    fn tune(&mut self, freq: f64, bandwidth: f64) {
        let w0 = 2.0 * PI * freq / SAMPLE_RATE as f64;
        let q = freq / bandwidth;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        self.b0 = alpha / a0;
        self.b2 = -alpha / a0;
        self.a1 = -2.0 * w0.cos() / a0;
        self.a2 = (1.0 - alpha) / a0;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Voicing gate in [0, 1]: voiced syllables separated by short breath-only gaps, 10 ms ramps.
fn voicing_envelope(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let ramp = (0.01 * sr) as usize;
    let mut env = vec![0.0; n];
    let mut t = (rng.random_range(0.0..0.03) * sr) as usize;
    while t < n {
        let len = (rng.random_range(0.15..0.32) * sr) as usize;
        let end = (t + len).min(n);
        for (i, e) in env[t..end].iter_mut().enumerate() {
            let a = (i.min(end - t - 1 - i) as f64 / ramp as f64).min(1.0);
            *e = a;
        }
        t = end + (rng.random_range(0.03..0.08) * sr) as usize;
    }
    env
}

fn synth_one(cfg: &CorpusConfig, index: usize) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let n = (cfg.duration_s * sr).round() as usize;
    let mut rng = item_rng(cfg.seed, index as u64);
    let (lo, hi) = cfg.style.pitch_range();
    let span = hi - lo;

    let base = rng.random_range(lo + 0.25 * span..hi - 0.25 * span);
    let depth = rng.random_range(0.05..0.18);
    let rate = rng.random_range(1.5..4.0);
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let decl = rng.random_range(-0.1..0.05);

    let gate = voicing_envelope(&mut rng, n);

    let fr = cfg.style.formant_ranges();
    let n_formants = rng.random_range(2..=4usize);
    let mut formants: Vec<(f64, f64, f64, f64)> = (0..n_formants)
        .map(|i| {
            let (a, b) = fr[i];
            let f_start = rng.random_range(a..b);
            let f_end = rng.random_range(a..b);
            let bw = rng.random_range(70.0..160.0) + 0.05 * f_start;
            let gain = rng.random_range(0.25..0.6);
            (f_start, f_end, bw, gain)
        })
        .collect();
    let mut res: Vec<Resonator> = formants
        .iter()
        .map(|&(f, _, bw, _)| Resonator::new(f, bw))
        .collect();

    let breath = cfg.style.breath_level();
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let tt = t as f64 / sr;
        let prog = t as f64 / n as f64;
        let f0 = (base * (1.0 + depth * (2.0 * PI * rate * tt + phase0).sin()) * (1.0 + decl * prog))
            .clamp(lo, hi);
        phase += 2.0 * PI * f0 / sr;
        if phase > 2.0 * PI * 1e6 {
            phase -= 2.0 * PI * 1e6;
        }
        let mut src = 0.0;
        let mut k = 1;
        while (k as f64) * f0 < 7000.0 {
            src += (k as f64 * phase).cos() / (k * k) as f64;
            k += 1;
        }
        src *= gate[t];
        if t % 160 == 0 {
            for (r, f) in res.iter_mut().zip(formants.iter_mut()) {
                let fc = f.0 + (f.1 - f.0) * prog;
                r.tune(fc, f.2);
            }
        }
        let mut y = src;
        for (r, f) in res.iter_mut().zip(&formants) {
            y += f.3 * r.tick(src);
        }
        let noise: f64 = rng.sample(StandardNormal);
        y += noise * breath * (1.0 + 2.0 * (1.0 - gate[t]));
        out.push(y);
    }
    peak_normalize(&mut out, PEAK_LEVEL);
    Waveform::new(cfg.utt_id(index), out)
}

/// Seeded speech-like bona fide waveforms, each peak-normalized to 0.9.
pub fn synth_bonafide(cfg: &CorpusConfig) -> Result<Vec<Waveform>> {
    cfg.validate()?;
    Ok((0..cfg.n_utts).map(|i| synth_one(cfg, i)).collect())
}
