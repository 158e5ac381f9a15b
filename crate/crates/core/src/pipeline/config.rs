//! Flat `key = value` experiment configuration and preset bindings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cm::{AugConfig, CmMode, TrainConfig};
use crate::datagen::{CorpusConfig, Split, SynthStyle, VocoderAssign, VocoderId};
use crate::distill::{DistillTarget, StudentInit};
use crate::error::{Error, Result};
use crate::eval::DimSelect;
use crate::optim::AdamConfig;
use crate::sslcore::{EncoderConfig, MaskConfig, SslTrainConfig};

/// Every accepted key with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("run.preset", "b1"),
    ("corpus.n_utts", "200"),
    ("corpus.duration_s", "1.0"),
    ("corpus.seed", "7"),
    ("corpus.dev_frac", "0.1"),
    ("corpus.test_frac", "0.3"),
    ("corpus.vocoders", "griffin,harmnoise"),
    ("corpus.assign", "round_robin"),
    ("vox.n_utts", "200"),
    ("vox.seed", "17"),
    ("alt.n_utts", "100"),
    ("alt.seed", "27"),
    ("shift.n_utts", "60"),
    ("shift.seed", "37"),
    ("encoder.dim", "64"),
    ("encoder.blocks", "2"),
    ("encoder.heads", "4"),
    ("encoder.ff_mult", "4"),
    ("encoder.conv_channels", "32"),
    ("ssl.seed", "1"),
    ("ssl.epochs", "20"),
    ("ssl.lr", "3e-4"),
    ("ssl.batch_size", "8"),
    ("ssl.max_len_s", "2.0"),
    ("ssl.span_len", "5"),
    ("ssl.mask_fraction", "0.5"),
    ("continual.epochs", "3"),
    ("continual.lr", "1e-4"),
    ("cm.mode", "single"),
    ("cm.encoder", "pretrain"),
    ("cm.encoder_b", "pretrain_b"),
    ("finetune.corpus", "voc_la"),
    ("train.lr0", "1e-4"),
    ("train.batch_size", "4"),
    ("train.max_epochs", "10"),
    ("train.patience", "10"),
    ("train.lambda_cf", "1"),
    ("train.lambda_dis", "100"),
    ("train.max_trunc_s", "4.0"),
    ("train.seed", "0"),
    ("train.temperature", "0.07"),
    ("aug.enabled", "true"),
    ("aug.fir_order", "3"),
    ("aug.max_tap", "0.3"),
    ("aug.snr_min_db", "10"),
    ("aug.snr_max_db", "30"),
    ("distill.target", "output"),
    ("distill.init", "teacher"),
    ("distill.teacher_a", "pretrain"),
    ("distill.teacher_b", "pretrain_b"),
    ("eval.rounds", "3"),
    ("eval.hist_bins", "41"),
    ("eval.traj_dim", "max_var"),
];

/// Alternate spellings stored under a canonical key.
const ALIASES: &[(&str, &str)] = &[("distill.lambda", "train.lambda_dis")];

pub const PRESETS: &[&str] = &["b1", "b2", "b3", "p1", "p2", "p3"];

fn canonical(key: &str) -> Option<&'static str> {
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map(|(_, c)| *c)
        .or_else(|| KEYS.iter().find(|(k, _)| *k == key).map(|(k, _)| *k))
}

/// Keys a preset binds, before any explicit setting.
fn preset_bindings(name: &str) -> Result<Vec<(&'static str, &'static str)>> {
    let (base, variant) = match name.split_once('-') {
        Some((b, v)) => (b, Some(v)),
        None => (name, None),
    };
    let mut out = match base {
        "b1" => vec![("cm.mode", "single"), ("cm.encoder", "pretrain")],
        "p1" => vec![("cm.mode", "single"), ("cm.encoder", "continual")],
        "b2" => vec![("cm.mode", "dual_diff"), ("cm.encoder", "pretrain"), ("cm.encoder_b", "pretrain_b")],
        "p2" => vec![("cm.mode", "dual_diff"), ("cm.encoder", "continual"), ("cm.encoder_b", "pretrain")],
        "b3" => vec![
            ("cm.mode", "distilled"),
            ("distill.teacher_a", "pretrain"),
            ("distill.teacher_b", "pretrain_b"),
        ],
        "p3" => vec![
            ("cm.mode", "distilled"),
            ("distill.teacher_a", "continual"),
            ("distill.teacher_b", "pretrain"),
        ],
        _ => return Err(Error::config("run.preset", format!("unknown preset `{name}`"))),
    };
    out.push((
        "finetune.corpus",
        match variant {
            None => "voc_la",
            Some("b") => "la_trn",
            Some("c") => "voc_vox",
            Some(v) => return Err(Error::config("run.preset", format!("unknown corpus variant `-{v}`"))),
        },
    ));
    Ok(out)
}

/// Explicitly set keys; everything else resolves through the preset and the defaults.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub explicit: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_preset(name: &str) -> Result<Self> {
        let mut c = Self::new();
        c.set("run.preset", name)?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = canonical(key).ok_or_else(|| Error::config(key, "unknown configuration key"))?;
        let v = value.trim();
        if v.contains(['\n', '\r']) {
            return Err(Error::config(key, "value must be a single line"));
        }
        if k == "run.preset" {
            preset_bindings(v)?;
        }
        self.explicit.insert(k.to_string(), v.to_string());
        Ok(())
    }

    /// `key=value`, as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv, "override must look like key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn preset(&self) -> &str {
        self.explicit.get("run.preset").map_or("b1", String::as_str)
    }

    /// Value after defaults, preset bindings and explicit settings.
    pub fn get(&self, key: &str) -> String {
        let k = canonical(key).unwrap_or_else(|| panic!("undocumented key `{key}`"));
        if let Some(v) = self.explicit.get(k) {
            return v.clone();
        }
        if let Some((_, v)) = preset_bindings(self.preset())
            .expect("preset validated on set")
            .into_iter()
            .find(|(pk, _)| *pk == k)
        {
            return v.to_string();
        }
        KEYS.iter().find(|(dk, _)| *dk == k).map(|(_, v)| v.to_string()).expect("known key")
    }

    pub fn resolved(&self) -> BTreeMap<&'static str, String> {
        KEYS.iter().map(|(k, _)| (*k, self.get(k))).collect()
    }

    /// Keys whose resolved values differ.
    pub fn diff(&self, other: &Self) -> Vec<(&'static str, String, String)> {
        let (a, b) = (self.resolved(), other.resolved());
        a.into_iter()
            .filter_map(|(k, v)| {
                let w = &b[k];
                (v != *w).then(|| (k, v, w.clone()))
            })
            .collect()
    }

    /// Explicit settings only, one per line, sorted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.explicit {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Every documented key with its resolved value.
    pub fn to_resolved_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.resolved() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// `#` starts a comment; blank lines are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut c = Self::new();
        let mut seen: BTreeMap<&str, (String, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(origin, format!("line {}: expected `key = value`", i + 1))
            })?;
            let k = k.trim();
            let canon = canonical(k).ok_or_else(|| {
                Error::config(k, format!("unknown configuration key (line {} of {})", i + 1, origin.display()))
            })?;
            if let Some((prev_key, prev)) = seen.get(canon) {
                if prev_key == k || prev != v.trim() {
                    return Err(Error::config(
                        k,
                        format!("conflicts with `{prev_key} = {prev}` (line {})", i + 1),
                    ));
                }
            }
            seen.insert(canon, (k.to_string(), v.trim().to_string()));
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn experiment(&self) -> Result<Experiment> {
        Experiment::from_config(self)
    }
}

/// Where a front-end checkpoint comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    /// Encoder pretrained on the main bona fide pool.
    Pretrain,
    /// Independent encoder pretrained on a disjoint pool.
    PretrainB,
    /// [`Binding::Pretrain`] continually trained on vocoded data.
    Continual,
    Path(PathBuf),
}

impl Binding {
    fn parse(key: &str, v: &str) -> Result<Self> {
        Ok(match v {
            "pretrain" => Binding::Pretrain,
            "pretrain_b" => Binding::PretrainB,
            "continual" => Binding::Continual,
            p if p.ends_with(".safetensors") => Binding::Path(PathBuf::from(p)),
            _ => {
                return Err(Error::config(
                    key,
                    format!("`{v}` is not pretrain|pretrain_b|continual|<file>.safetensors"),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneCorpus {
    /// Main bona fide pool with one vocoded copy per utterance.
    VocLa,
    /// Main bona fide pool with every vocoder applied to each utterance.
    LaTrn,
    /// Pretraining pool and its vocoded copies, subsampled to the `VocLa` batch count.
    VocVox,
}

impl FromStr for FinetuneCorpus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voc_la" => Ok(FinetuneCorpus::VocLa),
            "la_trn" => Ok(FinetuneCorpus::LaTrn),
            "voc_vox" => Ok(FinetuneCorpus::VocVox),
            _ => Err(Error::config("finetune.corpus", format!("`{s}` is not voc_la|la_trn|voc_vox"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub name: &'static str,
    pub config: CorpusConfig,
    pub split: Split,
}

/// Typed view of a resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub preset: String,
    pub mode: CmMode,
    pub encoder: Binding,
    pub encoder_b: Binding,
    pub distill_target: DistillTarget,
    pub distill_init: StudentInit,
    pub teacher_a: Binding,
    pub teacher_b: Binding,
    pub finetune_corpus: FinetuneCorpus,
    pub la: CorpusSpec,
    pub vox: CorpusSpec,
    pub alt: CorpusSpec,
    pub shift: CorpusSpec,
    pub vocoders: Vec<VocoderId>,
    pub assign: VocoderAssign,
    pub encoder_cfg: EncoderConfig,
    pub ssl_seed: u64,
    pub pretrain: SslTrainConfig,
    pub continual: SslTrainConfig,
    pub train: TrainConfig,
    pub rounds: usize,
    pub hist_bins: usize,
    pub traj_dim: DimSelect,
}

fn typed<T: FromStr>(c: &ExperimentConfig, key: &str) -> Result<T> {
    let v = c.get(key);
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn flag(c: &ExperimentConfig, key: &str) -> Result<bool> {
    match c.get(key).as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(Error::config(key, format!("`{v}` is not a boolean"))),
    }
}

impl Experiment {
    pub fn from_config(c: &ExperimentConfig) -> Result<Self> {
        let duration_s: f64 = typed(c, "corpus.duration_s")?;
        let corpus = |name: &'static str, n: &str, seed: &str, style, split: Split| -> Result<CorpusSpec> {
            let mut config = CorpusConfig::new(typed(c, n)?, duration_s, typed(c, seed)?);
            config.style = style;
            config.id_prefix = name.to_string();
            config.validate()?;
            split.validate()?;
            Ok(CorpusSpec { name, config, split })
        };
        let la_split = Split {
            dev_frac: typed(c, "corpus.dev_frac")?,
            test_frac: typed(c, "corpus.test_frac")?,
            test_set: "test-in".into(),
        };
        let train_dev = Split {
            dev_frac: typed(c, "corpus.dev_frac")?,
            test_frac: 0.0,
            test_set: "test-none".into(),
        };
        let all_test = Split {
            dev_frac: 0.0,
            test_frac: 1.0,
            test_set: "test-shift".into(),
        };
        let vocoders = c
            .get("corpus.vocoders")
            .split(',')
            .map(|v| v.trim().parse::<VocoderId>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::config("corpus.vocoders", e.to_string()))?;
        let assign_s = c.get("corpus.assign");
        let assign = VocoderAssign::parse(&assign_s)
            .ok_or_else(|| Error::config("corpus.assign", format!("`{assign_s}` is not all|round_robin")))?;
        let encoder_cfg = EncoderConfig {
            dim: typed(c, "encoder.dim")?,
            blocks: typed(c, "encoder.blocks")?,
            heads: typed(c, "encoder.heads")?,
            ff_mult: typed(c, "encoder.ff_mult")?,
            conv_channels: typed(c, "encoder.conv_channels")?,
        };
        encoder_cfg.validate()?;
        let mask = MaskConfig {
            span_len: typed(c, "ssl.span_len")?,
            mask_fraction: typed(c, "ssl.mask_fraction")?,
        };
        let pretrain = SslTrainConfig {
            epochs: typed(c, "ssl.epochs")?,
            lr: typed(c, "ssl.lr")?,
            batch_size: typed(c, "ssl.batch_size")?,
            mask,
            max_len_s: typed(c, "ssl.max_len_s")?,
        };
        pretrain.validate()?;
        let continual = SslTrainConfig {
            epochs: typed(c, "continual.epochs")?,
            lr: typed(c, "continual.lr")?,
            ..pretrain
        };
        continual.validate()?;
        let train = TrainConfig {
            lr0: typed(c, "train.lr0")?,
            adam: AdamConfig::default(),
            patience: typed(c, "train.patience")?,
            max_trunc_s: typed(c, "train.max_trunc_s")?,
            lambda_cf: typed(c, "train.lambda_cf")?,
            lambda_dis: typed(c, "train.lambda_dis")?,
            batch_size: typed(c, "train.batch_size")?,
            max_epochs: typed(c, "train.max_epochs")?,
            seed: typed(c, "train.seed")?,
            aug_enabled: flag(c, "aug.enabled")?,
            aug: AugConfig {
                fir_order: typed(c, "aug.fir_order")?,
                max_tap: typed(c, "aug.max_tap")?,
                snr_db: (typed(c, "aug.snr_min_db")?, typed(c, "aug.snr_max_db")?),
            },
            temperature: typed(c, "train.temperature")?,
            ..TrainConfig::default()
        };
        train.validate()?;
        let traj = c.get("eval.traj_dim");
        let traj_dim = if traj == "max_var" {
            DimSelect::MaxDiffVariance
        } else {
            DimSelect::Index(
                traj.parse()
                    .map_err(|_| Error::config("eval.traj_dim", format!("`{traj}` is not max_var or an index")))?,
            )
        };
        let rounds: usize = typed(c, "eval.rounds")?;
        if rounds == 0 {
            return Err(Error::config("eval.rounds", "must be >= 1"));
        }
        Ok(Self {
            preset: c.preset().to_string(),
            mode: c.get("cm.mode").parse()?,
            encoder: Binding::parse("cm.encoder", &c.get("cm.encoder"))?,
            encoder_b: Binding::parse("cm.encoder_b", &c.get("cm.encoder_b"))?,
            distill_target: c.get("distill.target").parse()?,
            distill_init: c.get("distill.init").parse()?,
            teacher_a: Binding::parse("distill.teacher_a", &c.get("distill.teacher_a"))?,
            teacher_b: Binding::parse("distill.teacher_b", &c.get("distill.teacher_b"))?,
            finetune_corpus: c.get("finetune.corpus").parse()?,
            la: corpus("la", "corpus.n_utts", "corpus.seed", SynthStyle::Default, la_split)?,
            vox: corpus("vox", "vox.n_utts", "vox.seed", SynthStyle::Default, train_dev.clone())?,
            alt: corpus("alt", "alt.n_utts", "alt.seed", SynthStyle::Alt, train_dev)?,
            shift: corpus("shift", "shift.n_utts", "shift.seed", SynthStyle::Shifted, all_test)?,
            vocoders,
            assign,
            encoder_cfg,
            ssl_seed: typed(c, "ssl.seed")?,
            pretrain,
            continual,
            train,
            rounds,
            hist_bins: typed(c, "eval.hist_bins")?,
            traj_dim,
        })
    }

    /// Front-end bindings the CM of this experiment needs.
    pub fn bindings(&self) -> Vec<&Binding> {
        match self.mode {
            CmMode::Single => vec![&self.encoder],
            CmMode::DualDiff => vec![&self.encoder, &self.encoder_b],
            CmMode::Distilled => vec![&self.teacher_a, &self.teacher_b],
        }
    }

    pub fn needs(&self, b: &Binding) -> bool {
        self.bindings().contains(&b)
    }

    pub fn needs_continual(&self) -> bool {
        self.needs(&Binding::Continual)
    }

    pub fn needs_pretrain_b(&self) -> bool {
        self.needs(&Binding::PretrainB)
    }

    /// Seed of each evaluation round; front ends stay fixed across rounds.
    pub fn round_seeds(&self) -> Vec<u64> {
        (0..self.rounds as u64).map(|r| self.train.seed + r).collect()
    }
}
