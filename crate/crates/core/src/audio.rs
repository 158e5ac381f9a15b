//! Waveform container and 16-bit PCM WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Peak level every generated or resynthesized waveform is normalized to.
pub const PEAK_LEVEL: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(id: impl Into<String>, samples: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Checks the sample-rate and amplitude invariants.
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::input(format!(
                "{}: sample rate {} != {SAMPLE_RATE}",
                self.id, self.sample_rate
            )));
        }
        if let Some(i) = self
            .samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::input(format!(
                "{}: sample {i} = {} outside [-1, 1]",
                self.id, self.samples[i]
            )));
        }
        Ok(())
    }
}

/// Scales `samples` so that the largest magnitude equals `peak`. Silence is left untouched.
pub fn peak_normalize(samples: &mut [f64], peak: f64) {
    let m = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if m > 0.0 {
        let g = peak / m;
        samples.iter_mut().for_each(|s| *s *= g);
    }
}

fn to_i16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &w.samples {
        writer.write_sample(to_i16(s)).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

pub fn read_wav(path: &Path, id: impl Into<String>) -> Result<Waveform> {
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut reader = hound::WavReader::open(path).map_err(wrap)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(path, "expected mono 16-bit PCM"));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::format(
            path,
            format!("sample rate {} != {SAMPLE_RATE}", spec.sample_rate),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32767.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wrap)?;
    Ok(Waveform::new(id, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validate_rejects_out_of_range() {
        let w = Waveform::new("x", vec![0.0, 1.5]);
        assert!(w.validate().is_err());
        let mut w = Waveform::new("x", vec![0.0, 0.5]);
        assert!(w.validate().is_ok());
        w.sample_rate = 8000;
        assert!(w.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn wav_round_trip_within_one_step(samples in prop::collection::vec(-1.0f64..=1.0, 1..400)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("a.wav");
            let w = Waveform::new("a", samples);
            write_wav(&p, &w).unwrap();
            let back = read_wav(&p, "a").unwrap();
            prop_assert_eq!(back.len(), w.len());
            for (a, b) in w.samples.iter().zip(&back.samples) {
                prop_assert!((a - b).abs() <= 1.0 / 32767.0 + 1e-12);
            }
        }
    }
}
