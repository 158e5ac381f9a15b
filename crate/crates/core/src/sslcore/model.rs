//! Convolutional downsampler + pre-norm transformer encoder with a final layer norm.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{
    bind, join_name, put_tree, randn, take_tree, Linear, MapFn, Norm, ParamTree, VisitMutFn,
};
use crate::tensorfile::TensorFile;

/// `(kernel, stride)` of each waveform convolution. Receptive field 400, total stride 320.
pub const CONV_SCHEDULE: [(usize, usize); 7] =
    [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)];
pub const RECEPTIVE_FIELD: usize = 400;
pub const FRAME_STRIDE: usize = 320;
/// Zero samples added on each side of the waveform so that `N = floor(len / 320)`.
pub const EDGE_PAD: usize = 40;
const POS_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub conv_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            blocks: 2,
            heads: 4,
            ff_mult: 4,
            conv_channels: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("conv_channels", self.conv_channels),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("dim {} not divisible by {} heads", self.dim, self.heads),
            ));
        }
        Ok(())
    }
}

/// Frames produced for a waveform of `num_samples` samples.
pub fn num_frames(num_samples: usize) -> usize {
    num_samples / FRAME_STRIDE
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: Norm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub ln2: Norm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

impl<T> ParamTree<T> for Block<T> {
    type Mapped<U> = Block<U>;
    fn map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> Block<U> {
        Block {
            ln1: self.ln1.map(&join_name(p, "ln1"), f),
            qkv: self.qkv.map(&join_name(p, "qkv"), f),
            proj: self.proj.map(&join_name(p, "proj"), f),
            ln2: self.ln2.map(&join_name(p, "ln2"), f),
            ff1: self.ff1.map(&join_name(p, "ff1"), f),
            ff2: self.ff2.map(&join_name(p, "ff2"), f),
        }
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitMutFn<'_, T>) {
        self.ln1.visit_mut(&join_name(p, "ln1"), f);
        self.qkv.visit_mut(&join_name(p, "qkv"), f);
        self.proj.visit_mut(&join_name(p, "proj"), f);
        self.ln2.visit_mut(&join_name(p, "ln2"), f);
        self.ff1.visit_mut(&join_name(p, "ff1"), f);
        self.ff2.visit_mut(&join_name(p, "ff2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub conv: Vec<Linear<T>>,
    pub feat_norm: Norm<T>,
    pub feat_proj: Linear<T>,
    pub mask_embedding: T,
    /// Residual positional convolution over frames, kernel 5.
    pub pos_conv: Linear<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Norm<T>,
}

impl<T> ParamTree<T> for EncoderWeights<T> {
    type Mapped<U> = EncoderWeights<U>;
    fn map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> EncoderWeights<U> {
        EncoderWeights {
            conv: self.conv.map(&join_name(p, "conv"), f),
            feat_norm: self.feat_norm.map(&join_name(p, "feat_norm"), f),
            feat_proj: self.feat_proj.map(&join_name(p, "feat_proj"), f),
            mask_embedding: f(&join_name(p, "mask_embedding"), &self.mask_embedding),
            pos_conv: self.pos_conv.map(&join_name(p, "pos_conv"), f),
            blocks: self.blocks.map(&join_name(p, "blocks"), f),
            final_norm: self.final_norm.map(&join_name(p, "final_norm"), f),
        }
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitMutFn<'_, T>) {
        self.conv.visit_mut(&join_name(p, "conv"), f);
        self.feat_norm.visit_mut(&join_name(p, "feat_norm"), f);
        self.feat_proj.visit_mut(&join_name(p, "feat_proj"), f);
        f(&join_name(p, "mask_embedding"), &mut self.mask_embedding);
        self.pos_conv.visit_mut(&join_name(p, "pos_conv"), f);
        self.blocks.visit_mut(&join_name(p, "blocks"), f);
        self.final_norm.visit_mut(&join_name(p, "final_norm"), f);
    }
}

impl EncoderWeights<Mat> {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.conv_channels;
        let d = cfg.dim;
        let ff = cfg.ff_mult * d;
        let mut cin = 1;
        let conv = CONV_SCHEDULE
            .iter()
            .map(|&(k, _)| {
                let fan_in = k * cin;
                cin = c;
                Linear::init(&mut rng, fan_in, c, (2.0 / fan_in as f64).sqrt())
            })
            .collect();
        let feat_proj = Linear::init(&mut rng, c, d, (1.0 / c as f64).sqrt());
        let mask_embedding = randn(&mut rng, 1, d, 1.0);
        let pos_conv = Linear::init(&mut rng, POS_KERNEL * d, d, 0.5 / ((POS_KERNEL * d) as f64).sqrt());
        let sd = (1.0 / d as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                ln1: Norm::identity(d),
                qkv: Linear::init(&mut rng, d, 3 * d, sd),
                proj: Linear::init(&mut rng, d, d, sd),
                ln2: Norm::identity(d),
                ff1: Linear::init(&mut rng, d, ff, (2.0 / d as f64).sqrt()),
                ff2: Linear::init(&mut rng, ff, d, (1.0 / ff as f64).sqrt()),
            })
            .collect();
        EncoderWeights {
            conv,
            feat_norm: Norm::identity(c),
            feat_proj,
            mask_embedding,
            pos_conv,
            blocks,
            final_norm: Norm::identity(d),
        }
    }
}

/// Encoder weights plus their architecture and training-stage tag.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub stage: String,
    pub weights: EncoderWeights<Mat>,
}

/// A `N x D` sequence of frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub values: Mat,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, values: Mat) -> Self {
        Self {
            id: id.into(),
            values,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Graph nodes of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    /// Projected conv features before masking, `N x D`.
    pub conv: Var,
    /// Output of each transformer block.
    pub hidden: Vec<Var>,
    /// Final layer-norm output.
    pub output: Var,
}

pub(crate) fn check_length(w: &Waveform) -> Result<()> {
    if w.len() < RECEPTIVE_FIELD {
        return Err(Error::input(format!(
            "waveform `{}` has {} samples; the encoder needs at least {RECEPTIVE_FIELD}",
            w.id,
            w.len()
        )));
    }
    Ok(())
}

fn attention(g: &mut Graph, b: &Block<Var>, x: Var, dim: usize, heads: usize) -> Var {
    let qkv = b.qkv.forward(g, x);
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let q = g.slice_cols(qkv, h * dh, dh);
            let k = g.slice_cols(qkv, dim + h * dh, dh);
            let v = g.slice_cols(qkv, 2 * dim + h * dh, dh);
            let kt = g.transpose(k);
            let s = g.matmul(q, kt);
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s);
            g.matmul(p, v)
        })
        .collect();
    let o = g.concat_cols(&outs);
    b.proj.forward(g, o)
}

/// Conv stack, feature norm and projection: waveform to `N x D`.
pub fn conv_features(g: &mut Graph, w: &EncoderWeights<Var>, samples: &[f64]) -> Var {
    let x = g.leaf(Mat::from_shape_vec((samples.len(), 1), samples.to_vec()).expect("column"));
    let mut h = g.pad_rows(x, EDGE_PAD, EDGE_PAD);
    for (layer, &(k, s)) in w.conv.iter().zip(CONV_SCHEDULE.iter()) {
        let cols = g.im2col(h, k, s);
        let y = layer.forward(g, cols);
        h = g.gelu(y);
    }
    let h = w.feat_norm.forward(g, h);
    w.feat_proj.forward(g, h)
}

/// Full encoder pass; rows flagged in `mask` are replaced by the mask embedding.
pub fn encoder_pass(
    g: &mut Graph,
    w: &EncoderWeights<Var>,
    cfg: &EncoderConfig,
    samples: &[f64],
    mask: Option<&[bool]>,
) -> EncoderPass {
    let conv = conv_features(g, w, samples);
    let mut x = match mask {
        Some(m) => g.replace_rows(conv, w.mask_embedding, m),
        None => conv,
    };
    let half = POS_KERNEL / 2;
    let padded = g.pad_rows(x, half, half);
    let cols = g.im2col(padded, POS_KERNEL, 1);
    let pos = w.pos_conv.forward(g, cols);
    let pos = g.gelu(pos);
    x = g.add(x, pos);
    let mut hidden = Vec::with_capacity(w.blocks.len());
    for b in &w.blocks {
        let h = b.ln1.forward(g, x);
        let a = attention(g, b, h, cfg.dim, cfg.heads);
        x = g.add(x, a);
        let h = b.ln2.forward(g, x);
        let h = b.ff1.forward(g, h);
        let h = g.gelu(h);
        let h = b.ff2.forward(g, h);
        x = g.add(x, h);
        hidden.push(x);
    }
    let output = w.final_norm.forward(g, x);
    EncoderPass {
        conv,
        hidden,
        output,
    }
}

impl EncoderParams {
    /// Freshly initialized encoder.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            stage: "init".into(),
            weights: EncoderWeights::init(&config, seed),
        })
    }

    fn run(&self, w: &Waveform) -> Result<(Graph, EncoderPass)> {
        check_length(w)?;
        let mut g = Graph::new();
        let vars = bind(&mut g, &self.weights);
        let pass = encoder_pass(&mut g, &vars, &self.config, &w.samples, None);
        Ok((g, pass))
    }

    pub fn encode(&self, w: &Waveform) -> Result<FeatureSequence> {
        let (g, pass) = self.run(w)?;
        Ok(FeatureSequence::new(w.id.clone(), g.value(pass.output).clone()))
    }

    /// Output of every transformer block.
    pub fn encode_hidden(&self, w: &Waveform) -> Result<Vec<FeatureSequence>> {
        let (g, pass) = self.run(w)?;
        Ok(pass
            .hidden
            .iter()
            .map(|&h| FeatureSequence::new(w.id.clone(), g.value(h).clone()))
            .collect())
    }

    /// Writes weights and architecture metadata under `prefix`.
    pub fn put(&self, tf: &mut TensorFile, prefix: &str) {
        put_tree(tf, prefix, &self.weights);
        let c = &self.config;
        let key = |k: &str| join_name(prefix, k);
        tf.set_meta(key("dim"), c.dim);
        tf.set_meta(key("blocks"), c.blocks);
        tf.set_meta(key("heads"), c.heads);
        tf.set_meta(key("ff_mult"), c.ff_mult);
        tf.set_meta(key("conv_channels"), c.conv_channels);
        tf.set_meta(
            key("conv_schedule"),
            CONV_SCHEDULE
                .iter()
                .map(|(k, s)| format!("{k}/{s}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        tf.set_meta(key("stage"), &self.stage);
    }

    /// Reads an encoder written by [`EncoderParams::put`] under the same prefix.
    pub fn take(tf: &mut TensorFile, prefix: &str, path: &Path) -> Result<Self> {
        let key = |k: &str| join_name(prefix, k);
        let config = EncoderConfig {
            dim: tf.meta_parse(&key("dim"), path)?,
            blocks: tf.meta_parse(&key("blocks"), path)?,
            heads: tf.meta_parse(&key("heads"), path)?,
            ff_mult: tf.meta_parse(&key("ff_mult"), path)?,
            conv_channels: tf.meta_parse(&key("conv_channels"), path)?,
        };
        config
            .validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let stage = tf.meta_str(&key("stage"), path)?.to_string();
        let mut weights = EncoderWeights::init(&config, 0);
        take_tree(tf, prefix, &mut weights, path)?;
        Ok(Self {
            config,
            stage,
            weights,
        })
    }

    /// Checkpoint with one tensor per parameter and architecture metadata.
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut tf = TensorFile::default();
        tf.set_meta("kind", "encoder");
        tf.set_meta("precision", "f64");
        self.put(&mut tf, "");
        tf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn from_tensor_file(mut tf: TensorFile, path: &Path) -> Result<Self> {
        let kind = tf.meta_str("kind", path)?;
        if kind != "encoder" {
            return Err(Error::format(path, format!("expected an encoder checkpoint, found `{kind}`")));
        }
        let p = Self::take(&mut tf, "", path)?;
        if let Some(extra) = tf.tensors.keys().next() {
            return Err(Error::format(path, format!("unexpected tensor `{extra}`")));
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(TensorFile::read(path)?, path)
    }
}
