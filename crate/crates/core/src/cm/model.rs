//! Front-end modes, checkpointing and scoring of the full countermeasure.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::audio::Waveform;
use crate::distill::{check_teachers, diff_features, DiffMode, DistillConfig, DistillTarget, StudentInit};
use crate::error::{Error, Result};
use crate::nn::{all_finite, put_tree, take_tree};
use crate::sslcore::{EncoderParams, FeatureSequence};
use crate::tensorfile::TensorFile;

use super::backend::{backend_score, BackendParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmMode {
    Single,
    /// Signed difference between the trainable encoder and a frozen second one.
    DualDiff,
    /// Student encoder distilled from two frozen teachers.
    Distilled,
}

impl CmMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CmMode::Single => "single",
            CmMode::DualDiff => "dual_diff",
            CmMode::Distilled => "distilled",
        }
    }
}

impl fmt::Display for CmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CmMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(CmMode::Single),
            "dual_diff" => Ok(CmMode::DualDiff),
            "distilled" => Ok(CmMode::Distilled),
            _ => Err(Error::config("cm.mode", format!("`{s}` is not single|dual_diff|distilled"))),
        }
    }
}

/// Loaded teacher pair and what to distill from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Teachers {
    pub a: EncoderParams,
    pub b: EncoderParams,
    pub target: DistillTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CMModel {
    pub mode: CmMode,
    /// Trainable front end (the student in distilled mode).
    pub encoder: EncoderParams,
    pub encoder_b: Option<EncoderParams>,
    pub distill: Option<DistillConfig>,
    /// Needed for training in distilled mode, not for scoring.
    pub teachers: Option<Teachers>,
    pub backend: BackendParams,
}

impl CMModel {
    pub fn single(encoder: EncoderParams, backend_seed: u64) -> Self {
        let backend = BackendParams::init(encoder.config.dim, backend_seed);
        Self {
            mode: CmMode::Single,
            encoder,
            encoder_b: None,
            distill: None,
            teachers: None,
            backend,
        }
    }

    pub fn dual_diff(encoder: EncoderParams, encoder_b: EncoderParams, backend_seed: u64) -> Result<Self> {
        let m = Self {
            mode: CmMode::DualDiff,
            backend: BackendParams::init(encoder.config.dim, backend_seed),
            encoder,
            encoder_b: Some(encoder_b),
            distill: None,
            teachers: None,
        };
        m.validate()?;
        Ok(m)
    }

    /// Student initialized from teacher A (or randomly) per `cfg.student_init`.
    pub fn distilled(
        cfg: DistillConfig,
        teacher_a: EncoderParams,
        teacher_b: EncoderParams,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        check_teachers(&teacher_a, &teacher_b)?;
        let student = crate::distill::student_from(&teacher_a, cfg.student_init, seed);
        let m = Self {
            mode: CmMode::Distilled,
            backend: BackendParams::init(student.config.dim, seed),
            encoder: student,
            encoder_b: None,
            teachers: Some(Teachers {
                a: teacher_a,
                b: teacher_b,
                target: cfg.target,
            }),
            distill: Some(cfg),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.encoder.config.dim;
        if self.backend.dim() != d {
            return Err(Error::config(
                "cm.backend",
                format!("back end width {} does not match encoder dim {d}", self.backend.dim()),
            ));
        }
        match self.mode {
            CmMode::Single => {}
            CmMode::DualDiff => match &self.encoder_b {
                None => return Err(Error::config("cm.encoder_b", "dual_diff needs a second encoder")),
                Some(b) if b.config.dim != d => {
                    return Err(Error::config(
                        "cm.encoder_b",
                        format!("second encoder has dim {}, expected {d}", b.config.dim),
                    ))
                }
                Some(_) => {}
            },
            CmMode::Distilled => {
                let cfg = self
                    .distill
                    .as_ref()
                    .ok_or_else(|| Error::config("distill", "distilled mode needs a distill config"))?;
                cfg.validate()?;
                if let Some(t) = &self.teachers {
                    check_teachers(&t.a, &t.b)?;
                    if t.a.config.dim != d {
                        return Err(Error::config(
                            "distill.teacher_a",
                            format!("teacher dim {} does not match student dim {d}", t.a.config.dim),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Back-end input for a waveform.
    pub fn features(&self, w: &Waveform) -> Result<FeatureSequence> {
        let x = self.encoder.encode(w)?;
        match (self.mode, &self.encoder_b) {
            (CmMode::DualDiff, Some(b)) => diff_features(&x, &b.encode(w)?, DiffMode::Signed),
            (CmMode::DualDiff, None) => Err(Error::config("cm.encoder_b", "dual_diff needs a second encoder")),
            _ => Ok(x),
        }
    }

    pub fn params_finite(&self) -> bool {
        all_finite(&self.encoder.weights) && all_finite(&self.backend)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut tf = TensorFile::default();
        tf.set_meta("kind", "cm");
        tf.set_meta("precision", "f64");
        tf.set_meta("mode", self.mode);
        tf.set_meta("backend.dim", self.backend.dim());
        self.encoder.put(&mut tf, "encoder");
        if let Some(b) = &self.encoder_b {
            b.put(&mut tf, "encoder_b");
        }
        if let Some(c) = &self.distill {
            tf.set_meta("distill.lambda", c.lambda_dis);
            tf.set_meta("distill.target", c.target.as_str());
            tf.set_meta("distill.init", c.student_init.as_str());
            tf.set_meta("distill.teacher_a", c.teacher_a.display());
            tf.set_meta("distill.teacher_b", c.teacher_b.display());
        }
        put_tree(&mut tf, "backend", &self.backend);
        tf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    /// Teachers are not stored; a loaded distilled model can score but not train.
    pub fn from_tensor_file(mut tf: TensorFile, path: &Path) -> Result<Self> {
        let kind = tf.meta_str("kind", path)?;
        if kind != "cm" {
            return Err(Error::format(path, format!("expected a cm checkpoint, found `{kind}`")));
        }
        let mode: CmMode = tf
            .meta_str("mode", path)?
            .parse()
            .map_err(|e: Error| Error::format(path, e.to_string()))?;
        let encoder = EncoderParams::take(&mut tf, "encoder", path)?;
        let encoder_b = if mode == CmMode::DualDiff {
            Some(EncoderParams::take(&mut tf, "encoder_b", path)?)
        } else {
            None
        };
        let distill = if mode == CmMode::Distilled {
            let bad = |e: Error| Error::format(path, e.to_string());
            let mut c = DistillConfig::new(
                tf.meta_str("distill.teacher_a", path)?,
                tf.meta_str("distill.teacher_b", path)?,
            );
            c.lambda_dis = tf.meta_parse("distill.lambda", path)?;
            c.target = tf.meta_str("distill.target", path)?.parse().map_err(bad)?;
            c.student_init = tf
                .meta_str("distill.init", path)?
                .parse::<StudentInit>()
                .map_err(bad)?;
            Some(c)
        } else {
            None
        };
        let dim: usize = tf.meta_parse("backend.dim", path)?;
        let mut backend = BackendParams::init(dim, 0);
        take_tree(&mut tf, "backend", &mut backend, path)?;
        if let Some(extra) = tf.tensors.keys().next() {
            return Err(Error::format(path, format!("unexpected tensor `{extra}`")));
        }
        let m = Self {
            mode,
            encoder,
            encoder_b,
            distill,
            teachers: None,
            backend,
        };
        m.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(TensorFile::read(path)?, path)
    }
}

/// Full-length score, higher means more likely bona fide.
pub fn cm_score(model: &CMModel, w: &Waveform) -> Result<f64> {
    backend_score(&model.backend, &model.features(w)?)
}
