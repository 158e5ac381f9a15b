//! Masked-span regression pretraining and continual training.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::nn::{bind, collect_grads};
use crate::optim::{Adam, AdamConfig};

use super::model::{
    check_length, encoder_pass, num_frames, EncoderConfig, EncoderParams, EncoderWeights, RECEPTIVE_FIELD,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    /// Frames per masked span.
    pub span_len: usize,
    /// Number of spans is `ceil(mask_fraction * N / span_len)`; spans may overlap.
    pub mask_fraction: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            span_len: 5,
            mask_fraction: 0.5,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.span_len == 0 {
            return Err(Error::config("span_len", "must be >= 1"));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(Error::config("mask_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Seeded span mask over `n` frames.
pub fn span_mask(n: usize, cfg: &MaskConfig, seed: u64) -> Result<Vec<bool>> {
    cfg.validate()?;
    if n < cfg.span_len {
        return Err(Error::input(format!(
            "{n} frames cannot hold a {}-frame mask span; utterance too short",
            cfg.span_len
        )));
    }
    let spans = ((cfg.mask_fraction * n as f64) / cfg.span_len as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];
    for _ in 0..spans.max(1) {
        let start = rng.random_range(0..=n - cfg.span_len);
        mask[start..start + cfg.span_len].fill(true);
    }
    Ok(mask)
}

/// Mean L1 at masked frames between the encoder output and the detached pre-mask conv features.
pub fn masked_loss(
    g: &mut Graph,
    w: &EncoderWeights<Var>,
    cfg: &EncoderConfig,
    samples: &[f64],
    mask: &[bool],
) -> Var {
    let pass = encoder_pass(g, w, cfg, samples, Some(mask));
    let target = g.leaf(g.value(pass.conv).clone());
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let pred = g.select_rows(pass.output, &rows);
    let target = g.select_rows(target, &rows);
    let d = g.sub(pred, target);
    let d = g.abs(d);
    g.mean_all(d)
}

pub fn ssl_pretrain_loss(
    params: &EncoderParams,
    w: &Waveform,
    mask_cfg: &MaskConfig,
    seed: u64,
) -> Result<f64> {
    check_length(w)?;
    let mask = span_mask(num_frames(w.len()), mask_cfg, seed)?;
    let mut g = Graph::new();
    let vars = bind(&mut g, &params.weights);
    let loss = masked_loss(&mut g, &vars, &params.config, &w.samples, &mask);
    Ok(g.scalar(loss))
}

/// Mean loss over a set of utterances; utterance `i` uses mask seed `seed + i`.
pub fn mean_ssl_loss(
    params: &EncoderParams,
    waves: &[Waveform],
    mask_cfg: &MaskConfig,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, w) in waves.iter().enumerate() {
        total += ssl_pretrain_loss(params, w, mask_cfg, seed.wrapping_add(i as u64))?;
    }
    Ok(total / waves.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask: MaskConfig,
    /// Training crops are at most this long.
    pub max_len_s: f64,
}

impl SslTrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 20,
            lr: 3e-4,
            batch_size: 8,
            mask: MaskConfig::default(),
            max_len_s: 2.0,
        }
    }

    pub fn continual_default() -> Self {
        Self {
            epochs: 3,
            lr: 1e-4,
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        let min_s = RECEPTIVE_FIELD as f64 / SAMPLE_RATE as f64;
        if self.max_len_s < min_s {
            return Err(Error::config("max_len_s", format!("must be >= {min_s}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStat>,
}

impl TrainLog {
    /// One `epoch<TAB>mean_loss<TAB>lr` line per epoch.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            writeln!(s, "{}\t{}\t{}", e.epoch, e.mean_loss, e.lr).expect("write to String");
        }
        s
    }
}

fn load_all(manifest: &DatasetManifest) -> Result<Vec<Waveform>> {
    if manifest.is_empty() {
        return Err(Error::input("training manifest is empty"));
    }
    manifest.load_all()
}

/// Random crop of at most `max_len` samples.
fn crop<'a>(w: &'a Waveform, max_len: usize, rng: &mut ChaCha8Rng) -> &'a [f64] {
    if w.len() <= max_len {
        return &w.samples;
    }
    let start = rng.random_range(0..=w.len() - max_len);
    &w.samples[start..start + max_len]
}

/// Optimizes the masked-span loss in place, one Adam step per batch.
pub fn train_ssl(
    params: &mut EncoderParams,
    waves: &[Waveform],
    cfg: &SslTrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    for w in waves {
        check_length(w)?;
        if num_frames(w.len()) < cfg.mask.span_len {
            return Err(Error::input(format!(
                "waveform `{}` is too short for {}-frame mask spans",
                w.id, cfg.mask.span_len
            )));
        }
    }
    let max_len = (cfg.max_len_s * SAMPLE_RATE as f64) as usize;
    let mut opt = Adam::new(AdamConfig::default());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..waves.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let vars = bind(&mut g, &params.weights);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let samples = crop(&waves[i], max_len, &mut rng);
                let mask = span_mask(num_frames(samples.len()), &cfg.mask, rng.random())?;
                losses.push(masked_loss(&mut g, &vars, &params.config, samples, &mask));
            }
            let total = g.concat_rows(&losses);
            let loss = g.mean_all(total);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    value,
                    context: format!("epoch {epoch} batch {b}"),
                });
            }
            sum += value * batch.len() as f64;
            let grads = g.backward(loss);
            let gw = collect_grads(&g, &grads, &vars);
            opt.step(&mut params.weights, &gw, cfg.lr);
        }
        log.epochs.push(EpochStat {
            epoch,
            mean_loss: sum / waves.len() as f64,
            lr: cfg.lr,
        });
        log::info!("ssl epoch {epoch}: loss {:.5}", sum / waves.len() as f64);
    }
    Ok(log)
}

/// Encoder pretrained from scratch on the manifest's audio.
pub fn pretrain(
    manifest: &DatasetManifest,
    encoder: EncoderConfig,
    cfg: &SslTrainConfig,
    seed: u64,
) -> Result<(EncoderParams, TrainLog)> {
    let waves = load_all(manifest)?;
    let mut params = EncoderParams::init(encoder, seed)?;
    let log = train_ssl(&mut params, &waves, cfg, seed)?;
    params.stage = "pretrain".into();
    Ok((params, log))
}

/// Same objective as [`pretrain`], starting from `init`; every parameter is updated.
pub fn continual_train(
    init: &EncoderParams,
    vocoded: &DatasetManifest,
    cfg: &SslTrainConfig,
    seed: u64,
) -> Result<(EncoderParams, TrainLog)> {
    let waves = load_all(vocoded)?;
    let mut params = init.clone();
    let log = train_ssl(&mut params, &waves, cfg, seed)?;
    params.stage = "continual".into();
    Ok((params, log))
}
