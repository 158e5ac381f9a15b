//! On-disk toy corpora: bona fide WAVs, their features, and vocoded counterparts.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;

use super::features::{extract_features, AcousticFeatures, FeatConfig};
use super::synth::{item_rng, synth_bonafide, CorpusConfig};
use super::vocoder::{vocode, VocoderId};
use crate::audio::write_wav;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Label, ManifestEntry, HUMAN_SOURCE};
use crate::tensorfile::TensorFile;

pub const BONAFIDE_MANIFEST: &str = "bonafide.tsv";
pub const VOCODED_MANIFEST: &str = "vocoded.tsv";

/// Which vocoders resynthesize each bona fide utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocoderAssign {
    /// Every utterance through every vocoder.
    All,
    /// Utterance `i` through vocoder `i mod k` only (one spoof per bona fide utterance).
    RoundRobin,
}

impl VocoderAssign {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(VocoderAssign::All),
            "round_robin" => Some(VocoderAssign::RoundRobin),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VocoderAssign::All => "all",
            VocoderAssign::RoundRobin => "round_robin",
        }
    }
}

/// Partition of a corpus into train / dev / one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub dev_frac: f64,
    pub test_frac: f64,
    /// Subset name for test utterances, `test-*`.
    pub test_set: String,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            dev_frac: 0.1,
            test_frac: 0.3,
            test_set: "test-in".into(),
        }
    }
}

impl Split {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.dev_frac) || !ok(self.test_frac) || self.dev_frac + self.test_frac > 1.0 {
            return Err(Error::config("split", "fractions must lie in [0, 1] and sum to <= 1"));
        }
        if !self.test_set.starts_with("test-") || self.test_set.len() <= 5 {
            return Err(Error::config("split.test_set", "must look like `test-<name>`"));
        }
        Ok(())
    }

    /// Seeded subset name per utterance index.
    pub fn assign(&self, n: usize, seed: u64) -> Vec<String> {
        let n_test = (n as f64 * self.test_frac).round() as usize;
        let n_dev = ((n as f64 * self.dev_frac).round() as usize).min(n - n_test);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut item_rng(seed, u64::MAX));
        let mut out = vec![String::from("train"); n];
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_test {
                out[i] = self.test_set.clone();
            } else if rank < n_test + n_dev {
                out[i] = "dev".into();
            }
        }
        out
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Synthesizes the bona fide corpus into `dir/bonafide/` and writes `dir/bonafide.tsv`.
pub fn write_bonafide(cfg: &CorpusConfig, split: &Split, dir: &Path) -> Result<DatasetManifest> {
    split.validate()?;
    let wavs = synth_bonafide(cfg)?;
    let subsets = split.assign(wavs.len(), cfg.seed);
    let audio_dir = dir.join("bonafide");
    create_dir(&audio_dir)?;
    let mut m = DatasetManifest::new(dir);
    for (w, subset) in wavs.iter().zip(subsets) {
        let rel = format!("bonafide/{}.wav", w.id);
        write_wav(&dir.join(&rel), w)?;
        m.entries.push(ManifestEntry {
            id: w.id.clone(),
            path: rel,
            label: Label::Bonafide,
            source: HUMAN_SOURCE.into(),
            subset,
        });
    }
    m.write(&dir.join(BONAFIDE_MANIFEST))?;
    Ok(m)
}

pub fn extract_corpus_features(
    manifest: &DatasetManifest,
    cfg: &FeatConfig,
) -> Result<Vec<AcousticFeatures>> {
    manifest
        .entries
        .iter()
        .map(|e| extract_features(&manifest.load_audio(e)?, cfg))
        .collect()
}

fn vocoder_seed(seed: u64, index: usize, vocoder: VocoderId) -> u64 {
    let v = VocoderId::all().iter().position(|&x| x == vocoder).unwrap_or(0) as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((index as u64) << 4 | v)
}

/// Vocodes every bona fide utterance (per `assign`) into `dir/vocoded/` and writes
/// `dir/vocoded.tsv`. Vocoded ids are `<source id>__<vocoder>`.
pub fn vocode_corpus(
    bona: &DatasetManifest,
    feats: &[AcousticFeatures],
    vocoders: &[VocoderId],
    assign: VocoderAssign,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    if vocoders.is_empty() {
        return Err(Error::config("vocoders", "at least one vocoder id required"));
    }
    let audio_dir = dir.join("vocoded");
    create_dir(&audio_dir)?;
    let by_id: HashMap<&str, &AcousticFeatures> =
        feats.iter().map(|f| (f.source_id.as_str(), f)).collect();
    let mut m = DatasetManifest::new(dir);
    for (i, e) in bona.entries.iter().enumerate() {
        let feat = by_id
            .get(e.id.as_str())
            .ok_or_else(|| Error::input(format!("no features for `{}`", e.id)))?;
        let chosen: Vec<VocoderId> = match assign {
            VocoderAssign::All => vocoders.to_vec(),
            VocoderAssign::RoundRobin => vec![vocoders[i % vocoders.len()]],
        };
        for v in chosen {
            let w = vocode(feat, v, vocoder_seed(seed, i, v))?;
            let rel = format!("vocoded/{}.wav", w.id);
            write_wav(&dir.join(&rel), &w)?;
            m.entries.push(ManifestEntry {
                id: w.id,
                path: rel,
                label: Label::Spoof,
                source: v.as_str().into(),
                subset: e.subset.clone(),
            });
        }
    }
    m.write(&dir.join(VOCODED_MANIFEST))?;
    Ok(m)
}

/// Source utterance id of a vocoded id (`<src>__<vocoder>`).
pub fn source_utt(id: &str) -> &str {
    id.rsplit_once("__").map(|(s, _)| s).unwrap_or(id)
}

/// Full corpus build: bona fide audio, features, vocoded audio, and both manifests.
pub fn build_corpus(
    cfg: &CorpusConfig,
    split: &Split,
    vocoders: &[VocoderId],
    assign: VocoderAssign,
    output_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    create_dir(output_dir)?;
    let bona = write_bonafide(cfg, split, output_dir)?;
    let feats = extract_corpus_features(&bona, &FeatConfig::default())?;
    let voc = vocode_corpus(&bona, &feats, vocoders, assign, cfg.seed, output_dir)?;
    Ok((bona, voc))
}

/// Stores features as a tensor container: `mel.<id>`, optional `f0.<id>`, lengths in metadata.
pub fn write_features(path: &Path, feats: &[AcousticFeatures]) -> Result<()> {
    let mut tf = TensorFile::default();
    if let Some(first) = feats.first() {
        let c = &first.config;
        tf.set_meta(
            "feat_config",
            format!(
                "{} {} {} {} {} {} {} {}",
                c.window, c.hop, c.n_fft, c.n_mels, c.f0, c.f0_min, c.f0_max, c.voicing_threshold
            ),
        );
    }
    for f in feats {
        let (r, c) = f.mel.dim();
        tf.insert(
            format!("mel.{}", f.source_id),
            vec![r, c],
            f.mel.iter().copied().collect(),
        );
        if let Some(f0) = &f.f0 {
            tf.insert(format!("f0.{}", f.source_id), vec![f0.len()], f0.clone());
        }
        tf.set_meta(format!("num_samples.{}", f.source_id), f.num_samples);
    }
    tf.write(path)
}

/// Reads features back, ordered by source id.
pub fn read_features(path: &Path) -> Result<Vec<AcousticFeatures>> {
    let mut tf = TensorFile::read(path)?;
    let bad = |m: String| Error::format(path, m);
    let Some(s) = tf.meta.get("feat_config").cloned() else {
        return Ok(Vec::new());
    };
    let p: Vec<&str> = s.split(' ').collect();
    let num = |i: usize| -> Result<f64> {
        p.get(i)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad feat_config".into()))
    };
    let cfg = FeatConfig {
        window: num(0)? as usize,
        hop: num(1)? as usize,
        n_fft: num(2)? as usize,
        n_mels: num(3)? as usize,
        f0: p.get(4) == Some(&"true"),
        f0_min: num(5)?,
        f0_max: num(6)?,
        voicing_threshold: num(7)?,
    };
    let ids: Vec<String> = tf
        .meta
        .keys()
        .filter_map(|k| k.strip_prefix("num_samples.").map(str::to_string))
        .collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let (shape, data) = tf.take(&format!("mel.{id}"), path)?;
        if shape.len() != 2 {
            return Err(bad(format!("mel.{id}: expected 2-D")));
        }
        let mel = Array2::from_shape_vec((shape[0], shape[1]), data)
            .map_err(|e| bad(e.to_string()))?;
        let f0 = tf.tensors.remove(&format!("f0.{id}")).map(|(_, d)| d);
        let num_samples = tf.meta_parse(&format!("num_samples.{id}"), path)?;
        out.push(AcousticFeatures {
            mel,
            f0,
            frame_shift: cfg.hop as f64 / crate::audio::SAMPLE_RATE as f64,
            source_id: id,
            num_samples,
            config: cfg.clone(),
        });
    }
    Ok(out)
}

pub fn corpus_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(BONAFIDE_MANIFEST), dir.join(VOCODED_MANIFEST))
}
