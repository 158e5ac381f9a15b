use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::cm::{finetune, CMModel, CmMode, TrainConfig};
use crate::datagen::{
    extract_corpus_features, read_features, source_utt, vocode_corpus, write_bonafide, write_features,
    FeatConfig, VocoderAssign,
};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::{
    eer_report, feature_diff_histogram, feature_trajectory_export, group_by_set, multi_round, read_scores,
    score_dataset, write_scores, MultiRoundReport, POOLED,
};
use crate::manifest::{DatasetManifest, Label};
use crate::sslcore::{continual_train, mean_ssl_loss, pretrain, EncoderParams};

use super::config::{Binding, CorpusSpec, Experiment, ExperimentConfig, FinetuneCorpus};

pub const SUMMARY_FILE: &str = "summary.txt";
const CONFIG_FILE: &str = "config.txt";
const ENCODER_FILE: &str = "encoder.safetensors";
const ENCODER_B_FILE: &str = "encoder_b.safetensors";
const CM_FILE: &str = "cm.safetensors";
/// Every vocoder applied to each utterance of the main pool.
const LA_ALL: &str = "la_all";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Features,
    Vocode,
    Pretrain,
    Continual,
    Finetune,
    Score,
    Eer,
    Histogram,
    Trajectory,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Features,
        Stage::Vocode,
        Stage::Pretrain,
        Stage::Continual,
        Stage::Finetune,
        Stage::Score,
        Stage::Eer,
        Stage::Histogram,
        Stage::Trajectory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Features => "features",
            Stage::Vocode => "vocode",
            Stage::Pretrain => "pretrain",
            Stage::Continual => "continual",
            Stage::Finetune => "finetune",
            Stage::Score => "score",
            Stage::Eer => "eer",
            Stage::Histogram => "histogram",
            Stage::Trajectory => "trajectory",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub seed: u64,
    /// Relative to the preset directory when inside it.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

impl StageSummary {
    pub fn to_text(&self) -> String {
        format!(
            "stage = {}\nseed = {}\ninputs = {}\noutputs = {}\nwall_time_s = {:.3}\n",
            self.stage,
            self.seed,
            self.inputs.join(", "),
            self.outputs.join(", "),
            self.wall_time_s
        )
    }
}

pub fn stage_dir(run_dir: &Path, preset: &str, stage: Stage) -> PathBuf {
    run_dir.join(preset).join(stage.as_str())
}

struct Ctx<'a> {
    exp: &'a Experiment,
    root: PathBuf,
    out: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn upstream(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.as_str())
    }

    /// Path of an artifact produced by `stage`, recorded as an input.
    fn need(&mut self, stage: Stage, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.upstream(stage).join(rel);
        if !p.exists() {
            return Err(Error::MissingStage {
                stage: stage.as_str().into(),
                path: p,
            });
        }
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn manifest(&mut self, stage: Stage, rel: impl AsRef<Path>) -> Result<DatasetManifest> {
        let p = self.need(stage, rel)?;
        DatasetManifest::read(&p)
    }

    fn bona(&mut self, c: &CorpusSpec) -> Result<DatasetManifest> {
        self.manifest(Stage::Synth, Path::new(c.name).join("bonafide.tsv"))
    }

    fn vocoded(&mut self, name: &str) -> Result<DatasetManifest> {
        self.manifest(Stage::Vocode, Path::new(name).join("vocoded.tsv"))
    }

    fn encoder(&mut self, b: &Binding, key: &str) -> Result<EncoderParams> {
        let p = match b {
            Binding::Path(p) => {
                if !p.exists() {
                    return Err(Error::config(key, format!("checkpoint {} not found", p.display())));
                }
                self.inputs.push(p.clone());
                p.clone()
            }
            _ => {
                let (stage, file) = binding_path(b);
                self.need(stage, file)?
            }
        };
        EncoderParams::load(&p)
    }

    fn write(&self, rel: impl AsRef<Path>, text: &str) -> Result<()> {
        let p = self.out.join(rel);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn mkdir(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.out.join(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Stage and file name producing a non-path binding.
pub fn binding_path(b: &Binding) -> (Stage, &'static str) {
    match b {
        Binding::Pretrain => (Stage::Pretrain, ENCODER_FILE),
        Binding::PretrainB => (Stage::Pretrain, ENCODER_B_FILE),
        Binding::Continual => (Stage::Continual, ENCODER_FILE),
        Binding::Path(_) => panic!("path bindings have no producing stage"),
    }
}

fn binding_name(b: &Binding) -> String {
    match b {
        Binding::Pretrain => "pretrain".into(),
        Binding::PretrainB => "pretrain_b".into(),
        Binding::Continual => "continual".into(),
        Binding::Path(p) => p.file_stem().map_or("path".into(), |s| s.to_string_lossy().into_owned()),
    }
}

fn relative(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

fn list_files(dir: &Path, base: &Path, out: &mut Vec<String>) -> Result<()> {
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            list_files(&p, base, out)?;
        } else if p.file_name().is_some_and(|n| n != SUMMARY_FILE) {
            out.push(relative(&p, base));
        }
    }
    Ok(())
}

/// Runs one stage, replacing whatever that stage wrote before.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, run_dir: &Path) -> Result<StageSummary> {
    let exp = cfg.experiment()?;
    let root = run_dir.join(&exp.preset);
    let out = root.join(stage.as_str());
    if out.exists() {
        fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let start = Instant::now();
    let mut ctx = Ctx {
        exp: &exp,
        root: root.clone(),
        out: out.clone(),
        inputs: Vec::new(),
    };
    log::info!("{} / {stage}", exp.preset);
    let seed = match stage {
        Stage::Synth => synth(&mut ctx),
        Stage::Features => features(&mut ctx),
        Stage::Vocode => vocode(&mut ctx),
        Stage::Pretrain => pretrain_stage(&mut ctx),
        Stage::Continual => continual(&mut ctx),
        Stage::Finetune => finetune_stage(&mut ctx),
        Stage::Score => score(&mut ctx),
        Stage::Eer => eer(&mut ctx).map(|r| r.1),
        Stage::Histogram => histogram(&mut ctx),
        Stage::Trajectory => trajectory(&mut ctx),
    };
    let seed = match seed {
        Ok(s) => s,
        Err(e) => {
            // A failed stage leaves nothing behind.
            let _ = fs::remove_dir_all(&out);
            return Err(e);
        }
    };
    ctx.write(CONFIG_FILE, &cfg.to_resolved_text())?;
    let mut outputs = Vec::new();
    list_files(&out, &root, &mut outputs)?;
    outputs.sort();
    let mut inputs: Vec<String> = ctx.inputs.iter().map(|p| relative(p, &root)).collect();
    inputs.sort();
    inputs.dedup();
    let summary = StageSummary {
        stage,
        seed,
        inputs,
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let p = out.join(SUMMARY_FILE);
    fs::write(&p, summary.to_text()).map_err(|e| Error::io(&p, e))?;
    Ok(summary)
}

fn corpora(exp: &Experiment) -> [&CorpusSpec; 4] {
    [&exp.la, &exp.vox, &exp.alt, &exp.shift]
}

/// Pools that get vocoded: everything but the second pretraining pool.
fn vocoded_pools(exp: &Experiment) -> [&CorpusSpec; 3] {
    [&exp.la, &exp.vox, &exp.shift]
}

fn synth(ctx: &mut Ctx) -> Result<u64> {
    for c in corpora(ctx.exp) {
        write_bonafide(&c.config, &c.split, &ctx.mkdir(c.name)?)?;
    }
    Ok(ctx.exp.la.config.seed)
}

fn features(ctx: &mut Ctx) -> Result<u64> {
    for c in vocoded_pools(ctx.exp) {
        let bona = ctx.bona(c)?;
        let feats = extract_corpus_features(&bona, &FeatConfig::default())?;
        write_features(&ctx.out.join(format!("{}.safetensors", c.name)), &feats)?;
    }
    Ok(ctx.exp.la.config.seed)
}

fn vocode(ctx: &mut Ctx) -> Result<u64> {
    let exp = ctx.exp;
    let mut jobs: Vec<(&CorpusSpec, &str, VocoderAssign)> =
        vocoded_pools(exp).into_iter().map(|c| (c, c.name, exp.assign)).collect();
    if exp.finetune_corpus == FinetuneCorpus::LaTrn {
        jobs.push((&exp.la, LA_ALL, VocoderAssign::All));
    }
    for (c, name, assign) in jobs {
        let bona = ctx.bona(c)?;
        let feats = read_features(&ctx.need(Stage::Features, format!("{}.safetensors", c.name))?)?;
        vocode_corpus(&bona, &feats, &exp.vocoders, assign, c.config.seed, &ctx.mkdir(name)?)?;
    }
    Ok(exp.la.config.seed)
}

fn pretrain_stage(ctx: &mut Ctx) -> Result<u64> {
    let exp = ctx.exp;
    let vox = ctx.bona(&exp.vox)?.subset("train");
    let (enc, log) = pretrain(&vox, exp.encoder_cfg, &exp.pretrain, exp.ssl_seed)?;
    enc.save(&ctx.out.join(ENCODER_FILE))?;
    ctx.write("pretrain_log.txt", &log.to_text())?;
    if exp.needs_pretrain_b() {
        let alt = ctx.bona(&exp.alt)?.subset("train");
        let (mut enc_b, log_b) = pretrain(&alt, exp.encoder_cfg, &exp.pretrain, exp.ssl_seed + 1)?;
        enc_b.stage = "pretrain_b".into();
        enc_b.save(&ctx.out.join(ENCODER_B_FILE))?;
        ctx.write("pretrain_b_log.txt", &log_b.to_text())?;
    }
    Ok(exp.ssl_seed)
}

fn continual(ctx: &mut Ctx) -> Result<u64> {
    let exp = ctx.exp;
    let init = ctx.encoder(&Binding::Pretrain, "cm.encoder")?;
    let voc = ctx.vocoded(exp.vox.name)?;
    let seed = exp.ssl_seed + 2;
    let (enc, log) = continual_train(&init, &voc.subset("train"), &exp.continual, seed)?;
    enc.save(&ctx.out.join(ENCODER_FILE))?;
    ctx.write("continual_log.txt", &log.to_text())?;
    let held_out = voc.subset("dev").load_all()?;
    if !held_out.is_empty() {
        let before = mean_ssl_loss(&init, &held_out, &exp.continual.mask, seed + 1)?;
        let after = mean_ssl_loss(&enc, &held_out, &exp.continual.mask, seed + 1)?;
        ctx.write(
            "heldout_ssl_loss.txt",
            &format!(
                "n_utts = {}\npretrain = {before:.12e}\ncontinual = {after:.12e}\n",
                held_out.len()
            ),
        )?;
    }
    Ok(seed)
}

struct FinetuneData {
    bona: DatasetManifest,
    spoof: DatasetManifest,
    dev: DatasetManifest,
    batches_per_epoch: Option<usize>,
}

fn batches(bona: usize, spoof: usize, cfg: &TrainConfig) -> usize {
    let n = if cfg.lambda_cf > 0.0 { bona } else { bona + spoof };
    n.div_ceil(cfg.batch_size)
}

fn finetune_data(ctx: &mut Ctx) -> Result<FinetuneData> {
    let exp = ctx.exp;
    let split = |bona: DatasetManifest, voc: DatasetManifest, cap| FinetuneData {
        dev: DatasetManifest::merge(&[&bona.subset("dev"), &voc.subset("dev")]),
        bona: bona.subset("train"),
        spoof: voc.subset("train"),
        batches_per_epoch: cap,
    };
    let la = ctx.bona(&exp.la)?;
    Ok(match exp.finetune_corpus {
        FinetuneCorpus::VocLa => split(la, ctx.vocoded(exp.la.name)?, None),
        FinetuneCorpus::LaTrn => split(la, ctx.vocoded(LA_ALL)?, None),
        FinetuneCorpus::VocVox => {
            let la_voc = ctx.vocoded(exp.la.name)?;
            let cap = batches(
                la.subset("train").len(),
                la_voc.subset("train").len(),
                &exp.train,
            );
            split(ctx.bona(&exp.vox)?, ctx.vocoded(exp.vox.name)?, Some(cap))
        }
    })
}

fn build_model(ctx: &mut Ctx, seed: u64) -> Result<CMModel> {
    let exp = ctx.exp;
    match exp.mode {
        CmMode::Single => Ok(CMModel::single(ctx.encoder(&exp.encoder, "cm.encoder")?, seed)),
        CmMode::DualDiff => CMModel::dual_diff(
            ctx.encoder(&exp.encoder, "cm.encoder")?,
            ctx.encoder(&exp.encoder_b, "cm.encoder_b")?,
            seed,
        ),
        CmMode::Distilled => {
            let a = ctx.encoder(&exp.teacher_a, "distill.teacher_a")?;
            let b = ctx.encoder(&exp.teacher_b, "distill.teacher_b")?;
            // Relative to the preset directory so checkpoints do not depend on where the run lives.
            let path = |b: &Binding| match b {
                Binding::Path(p) => p.clone(),
                _ => {
                    let (stage, file) = binding_path(b);
                    Path::new(stage.as_str()).join(file)
                }
            };
            let cfg = DistillConfig {
                lambda_dis: exp.train.lambda_dis,
                target: exp.distill_target,
                student_init: exp.distill_init,
                teacher_a: path(&exp.teacher_a),
                teacher_b: path(&exp.teacher_b),
            };
            CMModel::distilled(cfg, a, b, seed)
        }
    }
}

fn round_dir(r: usize) -> String {
    format!("round{r}")
}

fn finetune_stage(ctx: &mut Ctx) -> Result<u64> {
    let exp = ctx.exp;
    for b in exp.bindings() {
        if !matches!(b, Binding::Path(_)) {
            let (stage, file) = binding_path(b);
            ctx.need(stage, file)?;
        }
    }
    let data = finetune_data(ctx)?;
    for (r, seed) in exp.round_seeds().into_iter().enumerate() {
        let model = build_model(ctx, seed)?;
        let cfg = TrainConfig {
            seed,
            batches_per_epoch: data.batches_per_epoch,
            ..exp.train.clone()
        };
        let (trained, report) = finetune(&model, &data.bona, &data.spoof, &cfg, &data.dev)
            .map_err(|e| Error::Round {
                round: r,
                source: Box::new(e),
            })?;
        let dir = ctx.mkdir(round_dir(r))?;
        trained.save(&dir.join(CM_FILE))?;
        fs::write(dir.join("train_log.txt"), report.to_text()).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(exp.train.seed)
}

/// `test-in` from the main pool and `test-shift` from the shifted pool.
fn test_sets(ctx: &mut Ctx) -> Result<Vec<(String, DatasetManifest)>> {
    let exp = ctx.exp;
    let mut out = Vec::new();
    for c in [&exp.la, &exp.shift] {
        let set = c.split.test_set.clone();
        let bona = ctx.bona(c)?.subset(&set);
        let voc = ctx.vocoded(c.name)?.subset(&set);
        out.push((set, DatasetManifest::merge(&[&bona, &voc])));
    }
    Ok(out)
}

fn score(ctx: &mut Ctx) -> Result<u64> {
    let exp = ctx.exp;
    let sets = test_sets(ctx)?;
    for r in 0..exp.rounds {
        let model = CMModel::load(&ctx.need(Stage::Finetune, Path::new(&round_dir(r)).join(CM_FILE))?)?;
        let mut records = Vec::new();
        for (name, m) in &sets {
            records.extend(score_dataset(&model, m, name)?);
        }
        write_scores(&ctx.out.join(format!("{}.scores", round_dir(r))), &records)?;
    }
    Ok(exp.train.seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetReport {
    pub preset: String,
    pub eer: MultiRoundReport,
    pub summaries: Vec<StageSummary>,
}

impl PresetReport {
    /// Mean EER in percent per test set and pooled.
    pub fn table_row(&self) -> String {
        table_row(&self.preset, &self.eer)
    }
}

fn table_row(preset: &str, rep: &MultiRoundReport) -> String {
    let mut names: Vec<&String> = rep.mean.keys().filter(|n| n.as_str() != POOLED).collect();
    names.push(rep.mean.keys().find(|n| n.as_str() == POOLED).expect("pooled mean present"));
    let mut s = format!("preset\t{}\n{preset}", names.iter().map(|n| n.as_str()).collect::<Vec<_>>().join("\t"));
    for n in names {
        let _ = write!(s, "\t{:.2}", rep.mean[n] * 100.0);
    }
    s.push('\n');
    s
}

fn read_rounds(ctx: &mut Ctx, seeds: &[u64]) -> Result<MultiRoundReport> {
    multi_round(seeds, |r, _| {
        let recs = read_scores(&ctx.need(Stage::Score, format!("{}.scores", round_dir(r)))?)?;
        Ok(group_by_set(&recs))
    })
}

fn eer(ctx: &mut Ctx) -> Result<(MultiRoundReport, u64)> {
    let exp = ctx.exp;
    let seeds = exp.round_seeds();
    let rep = read_rounds(ctx, &seeds)?;
    for (r, res) in rep.rounds.iter().enumerate() {
        ctx.write(format!("{}.txt", round_dir(r)), &eer_report(res))?;
    }
    ctx.write("report.txt", &rep.to_text())?;
    ctx.write("table.txt", &table_row(&exp.preset, &rep))?;
    Ok((rep, exp.train.seed))
}

/// Encoder pair compared by the diagnostics: the CM's own pair, or continual vs pretrain.
fn diag_pair(exp: &Experiment) -> (Binding, Binding) {
    match exp.mode {
        CmMode::Single => (Binding::Continual, Binding::Pretrain),
        CmMode::DualDiff => (exp.encoder.clone(), exp.encoder_b.clone()),
        CmMode::Distilled => (exp.teacher_a.clone(), exp.teacher_b.clone()),
    }
}

fn histogram(ctx: &mut Ctx) -> Result<u64> {
    let exp = ctx.exp;
    let (a, b) = diag_pair(exp);
    let (ea, eb) = (ctx.encoder(&a, "cm.encoder")?, ctx.encoder(&b, "cm.encoder_b")?);
    let set = exp.la.split.test_set.clone();
    let test = ctx.bona(&exp.la)?.subset(&set);
    let voc = ctx.vocoded(exp.la.name)?.subset(&set);
    let head = format!("# {} minus {}\n", binding_name(&a), binding_name(&b));
    for (label, m) in [(Label::Bonafide, test), (Label::Spoof, voc)] {
        let h = feature_diff_histogram(&ea, &eb, &m, exp.hist_bins)?;
        ctx.write(format!("hist_{label}.txt"), &format!("{head}{}", h.to_text()))?;
    }
    Ok(exp.la.config.seed)
}

fn trajectory(ctx: &mut Ctx) -> Result<u64> {
    let exp = ctx.exp;
    let (a, b) = diag_pair(exp);
    let encs = [
        (binding_name(&a), ctx.encoder(&a, "cm.encoder")?),
        (binding_name(&b), ctx.encoder(&b, "cm.encoder_b")?),
    ];
    let set = exp.la.split.test_set.clone();
    let bona = ctx.bona(&exp.la)?.subset(&set);
    let voc = ctx.vocoded(exp.la.name)?.subset(&set);
    let first = bona
        .entries
        .iter()
        .min_by(|x, y| x.id.cmp(&y.id))
        .ok_or_else(|| Error::input(format!("no bona fide utterances in `{set}`")))?;
    let mut picks = vec![bona.load_audio(first)?];
    if let Some(v) = voc.entries.iter().filter(|e| source_utt(&e.id) == first.id).min_by(|x, y| x.id.cmp(&y.id)) {
        picks.push(voc.load_audio(v)?);
    }
    let refs: Vec<(String, &EncoderParams)> = encs.iter().map(|(n, e)| (n.clone(), e)).collect();
    for w in &picks {
        let t = feature_trajectory_export(&refs, w, exp.traj_dim)?;
        ctx.write(format!("traj_{}.txt", w.id), &t.to_text())?;
    }
    Ok(exp.la.config.seed)
}

/// Stages a preset needs, in execution order.
fn preset_stages(exp: &Experiment) -> Vec<Stage> {
    let mut s = vec![Stage::Synth, Stage::Features, Stage::Vocode, Stage::Pretrain];
    if exp.needs_continual() {
        s.push(Stage::Continual);
    }
    s.extend([Stage::Finetune, Stage::Score, Stage::Eer]);
    s
}

/// Runs the preset's stage chain and reads back the EER report.
pub fn run_preset(cfg: &ExperimentConfig, run_dir: &Path) -> Result<PresetReport> {
    let exp = cfg.experiment()?;
    let mut summaries = Vec::new();
    for stage in preset_stages(&exp) {
        let s = run_stage(stage, cfg, run_dir).map_err(|e| Error::Stage {
            stage: stage.as_str().into(),
            source: Box::new(e),
        })?;
        summaries.push(s);
    }
    let eer_dir = stage_dir(run_dir, &exp.preset, Stage::Eer);
    let mut ctx = Ctx {
        exp: &exp,
        root: run_dir.join(&exp.preset),
        out: eer_dir,
        inputs: Vec::new(),
    };
    let eer = read_rounds(&mut ctx, &exp.round_seeds())?;
    Ok(PresetReport {
        preset: exp.preset.clone(),
        eer,
        summaries,
    })
}
