//! Differential features between two encoders and the teacher-pair distillation loss.

use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{bind, collect_grads};
use crate::optim::{Adam, AdamConfig};
use crate::sslcore::{encoder_pass, EncoderParams, FeatureSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffMode {
    /// `x - x~`
    Signed,
    /// `|x - x~|`
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillTarget {
    /// Final layer-norm outputs.
    Output,
    /// Every transformer block output.
    Hidden,
}

impl DistillTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillTarget::Output => "output",
            DistillTarget::Hidden => "hidden",
        }
    }
}

impl FromStr for DistillTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "output" => Ok(DistillTarget::Output),
            "hidden" => Ok(DistillTarget::Hidden),
            _ => Err(Error::config("distill.target", format!("`{s}` is not output|hidden"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentInit {
    /// Copy of teacher A.
    Teacher,
    Random,
}

impl StudentInit {
    pub fn as_str(self) -> &'static str {
        match self {
            StudentInit::Teacher => "teacher",
            StudentInit::Random => "random",
        }
    }
}

impl FromStr for StudentInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(StudentInit::Teacher),
            "random" => Ok(StudentInit::Random),
            _ => Err(Error::config("distill.init", format!("`{s}` is not teacher|random"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub lambda_dis: f64,
    pub target: DistillTarget,
    pub student_init: StudentInit,
    pub teacher_a: PathBuf,
    pub teacher_b: PathBuf,
}

impl DistillConfig {
    pub fn new(teacher_a: impl Into<PathBuf>, teacher_b: impl Into<PathBuf>) -> Self {
        Self {
            lambda_dis: 100.0,
            target: DistillTarget::Output,
            student_init: StudentInit::Teacher,
            teacher_a: teacher_a.into(),
            teacher_b: teacher_b.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dis >= 0.0 && self.lambda_dis.is_finite()) {
            return Err(Error::config("distill.lambda", "must be a finite value >= 0"));
        }
        Ok(())
    }

    /// Both teachers, checked to share dimension and depth.
    pub fn load_teachers(&self) -> Result<(EncoderParams, EncoderParams)> {
        self.validate()?;
        let a = EncoderParams::load(&self.teacher_a)?;
        let b = EncoderParams::load(&self.teacher_b)?;
        check_teachers(&a, &b)?;
        Ok((a, b))
    }
}

pub fn check_teachers(a: &EncoderParams, b: &EncoderParams) -> Result<()> {
    if a.config.dim != b.config.dim || a.config.blocks != b.config.blocks {
        return Err(Error::config(
            "distill.teacher_b",
            format!(
                "teachers differ: dim {} vs {}, blocks {} vs {}",
                a.config.dim, b.config.dim, a.config.blocks, b.config.blocks
            ),
        ));
    }
    Ok(())
}

fn same_shape(shapes: &[(usize, usize)]) -> Result<()> {
    if shapes.windows(2).any(|p| p[0] != p[1]) {
        return Err(Error::input(format!("feature shapes differ: {shapes:?}")));
    }
    Ok(())
}

pub fn diff_features(
    x: &FeatureSequence,
    x_tilde: &FeatureSequence,
    mode: DiffMode,
) -> Result<FeatureSequence> {
    same_shape(&[x.shape(), x_tilde.shape()])?;
    let d = &x.values - &x_tilde.values;
    let values = match mode {
        DiffMode::Signed => d,
        DiffMode::Absolute => d.mapv(f64::abs),
    };
    Ok(FeatureSequence::new(x.id.clone(), values))
}

/// `(1/N) sum_i || z_i - |x_i - x~_i| ||_1`: L1 summed over all D, averaged over frames.
pub fn distillation_loss(
    x: &FeatureSequence,
    x_tilde: &FeatureSequence,
    z: &FeatureSequence,
) -> Result<f64> {
    same_shape(&[x.shape(), x_tilde.shape(), z.shape()])?;
    let n = z.values.nrows() as f64;
    let total: f64 = ndarray::Zip::from(&x.values)
        .and(&x_tilde.values)
        .and(&z.values)
        .fold(0.0, |acc, &a, &b, &c| acc + (c - (a - b).abs()).abs());
    Ok(total / n)
}

/// Graph form of [`distillation_loss`] with a constant target `|x - x~|`.
pub fn distillation_loss_var(g: &mut Graph, z: Var, target: &Mat) -> Var {
    let n = g.shape(z).0 as f64;
    let t = g.leaf(target.clone());
    let d = g.sub(z, t);
    let d = g.abs(d);
    let s = g.sum_all(d);
    g.scale(s, 1.0 / n)
}

/// Student encoder: a bit-exact copy of teacher A, or freshly seeded weights.
pub fn init_student(cfg: &DistillConfig, seed: u64) -> Result<EncoderParams> {
    let (a, _) = cfg.load_teachers()?;
    Ok(student_from(&a, cfg.student_init, seed))
}

pub fn student_from(teacher_a: &EncoderParams, init: StudentInit, seed: u64) -> EncoderParams {
    let mut s = match init {
        StudentInit::Teacher => teacher_a.clone(),
        StudentInit::Random => EncoderParams::init(teacher_a.config, seed)
            .expect("teacher config already validated"),
    };
    s.stage = "student".into();
    s
}

/// Absolute teacher differences: one matrix for `Output`, one per block for `Hidden`.
/// Teachers run forward only.
pub fn distill_target(
    target: DistillTarget,
    teacher_a: &EncoderParams,
    teacher_b: &EncoderParams,
    w: &Waveform,
) -> Result<Vec<FeatureSequence>> {
    check_teachers(teacher_a, teacher_b)?;
    let (xa, xb) = match target {
        DistillTarget::Output => (
            vec![teacher_a.encode(w)?],
            vec![teacher_b.encode(w)?],
        ),
        DistillTarget::Hidden => (teacher_a.encode_hidden(w)?, teacher_b.encode_hidden(w)?),
    };
    xa.iter()
        .zip(&xb)
        .map(|(a, b)| diff_features(a, b, DiffMode::Absolute))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillTrainConfig {
    pub lambda_dis: f64,
    pub target: DistillTarget,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillTrainConfig {
    fn default() -> Self {
        Self {
            lambda_dis: 100.0,
            target: DistillTarget::Output,
            steps: 200,
            batch_size: 4,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Mean distillation loss of `student` against the teacher-pair targets over `waves`.
pub fn mean_distillation_loss(
    student: &EncoderParams,
    teacher_a: &EncoderParams,
    teacher_b: &EncoderParams,
    target: DistillTarget,
    waves: &[Waveform],
) -> Result<f64> {
    if waves.is_empty() {
        return Err(Error::input("no utterances"));
    }
    let mut total = 0.0;
    for w in waves {
        let targets = distill_target(target, teacher_a, teacher_b, w)?;
        let zs = match target {
            DistillTarget::Output => vec![student.encode(w)?],
            DistillTarget::Hidden => student.encode_hidden(w)?,
        };
        let mut per = 0.0;
        for (z, t) in zs.iter().zip(&targets) {
            same_shape(&[z.shape(), t.shape()])?;
            per += (&z.values - &t.values).mapv(f64::abs).sum() / z.values.nrows() as f64;
        }
        total += per / zs.len() as f64;
    }
    Ok(total / waves.len() as f64)
}

/// Trains `student` on `lambda_dis * L_dis` alone with Adam; returns the loss of every step.
pub fn distill_train(
    student: &mut EncoderParams,
    teacher_a: &EncoderParams,
    teacher_b: &EncoderParams,
    waves: &[Waveform],
    cfg: &DistillTrainConfig,
) -> Result<Vec<f64>> {
    check_teachers(teacher_a, teacher_b)?;
    if student.config != teacher_a.config {
        return Err(Error::config("distill.student", "student and teachers differ in architecture"));
    }
    if waves.is_empty() || cfg.batch_size == 0 {
        return Err(Error::input("need utterances and batch_size >= 1"));
    }
    let targets: Vec<Vec<Mat>> = waves
        .iter()
        .map(|w| Ok(distill_target(cfg.target, teacher_a, teacher_b, w)?.into_iter().map(|f| f.values).collect()))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(waves.len()) {
            if order.is_empty() {
                order = (0..waves.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let mut g = Graph::new();
        let vars = bind(&mut g, &student.weights);
        let mut per = Vec::with_capacity(batch.len());
        for &i in &batch {
            let pass = encoder_pass(&mut g, &vars, &student.config, &waves[i].samples, None);
            let zs = match cfg.target {
                DistillTarget::Output => vec![pass.output],
                DistillTarget::Hidden => pass.hidden.clone(),
            };
            let parts: Vec<Var> = zs
                .iter()
                .zip(&targets[i])
                .map(|(&z, t)| distillation_loss_var(&mut g, z, t))
                .collect();
            let cat = g.concat_rows(&parts);
            per.push(g.mean_all(cat));
        }
        let cat = g.concat_rows(&per);
        let mean = g.mean_all(cat);
        let loss = g.scale(mean, cfg.lambda_dis);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                value,
                context: format!("distillation step {step}"),
            });
        }
        log.push(value);
        let grads = collect_grads(&g, &g.backward(loss), &vars);
        opt.step(&mut student.weights, &grads, cfg.lr);
    }
    Ok(log)
}
