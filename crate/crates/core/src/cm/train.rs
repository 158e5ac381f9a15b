//! Supervised fine-tuning of front end and back end together.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::autodiff::{Graph, Mat, Var};
use crate::datagen::source_utt;
use crate::distill::{distill_target, distillation_loss_var, DistillTarget};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Label};
use crate::nn::{bind, collect_grads, join_name, MapFn, ParamTree, VisitMutFn};
use crate::optim::{Adam, AdamConfig};
use crate::sslcore::{encoder_pass, EncoderWeights, RECEPTIVE_FIELD};

use super::augment::{augment, AugConfig};
use super::backend::Backend;
use super::loss::{contrastive_var, ViewClass, DEFAULT_TEMPERATURE};
use super::model::{cm_score, CMModel, CmMode};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub adam: AdamConfig,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub patience: usize,
    pub max_trunc_s: f64,
    pub lambda_cf: f64,
    pub lambda_dis: f64,
    /// Four-view groups per batch when `lambda_cf > 0`, otherwise utterances.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub aug_enabled: bool,
    pub aug: AugConfig,
    pub temperature: f64,
    /// Caps the number of batches drawn per epoch.
    pub batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            adam: AdamConfig::default(),
            lr_decay: 0.1,
            decay_every: 10,
            patience: 10,
            max_trunc_s: 4.0,
            lambda_cf: 1.0,
            lambda_dis: 100.0,
            batch_size: 4,
            max_epochs: 10,
            seed: 0,
            aug_enabled: true,
            aug: AugConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    /// Full-scale learning rate and epoch budget.
    pub fn full_scale() -> Self {
        Self {
            lr0: 5e-6,
            batch_size: 8,
            max_epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !pos(self.lr0) {
            return Err(Error::config("train.lr0", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.decay_every == 0 {
            return Err(Error::config("train.lr_decay", "factor must lie in (0, 1] with a period >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be >= 1"));
        }
        if !(self.max_trunc_s * SAMPLE_RATE as f64 >= RECEPTIVE_FIELD as f64) {
            return Err(Error::config("train.max_trunc_s", "shorter than the encoder receptive field"));
        }
        if !nonneg(self.lambda_cf) {
            return Err(Error::config("train.lambda_cf", "must be >= 0"));
        }
        if !nonneg(self.lambda_dis) {
            return Err(Error::config("train.lambda_dis", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !pos(self.temperature) {
            return Err(Error::config("train.temperature", "must be positive"));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::config("train.batches_per_epoch", "must be >= 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Tracks the best dev loss and decides when to stop.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
        }
    }

    /// Records the loss of `epoch`; true if it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best_epoch.is_some_and(|b| epoch - b >= self.patience)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub ce: f64,
    pub cf: f64,
    pub dis: f64,
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch\tlr\ttrain_loss\tce\tcf\tdis\tdev_loss\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:e}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
                e.epoch, e.lr, e.train_loss, e.ce, e.cf, e.dis, e.dev_loss
            );
        }
        let _ = writeln!(s, "# best_epoch = {}", self.best_epoch);
        let _ = writeln!(s, "# best_dev_loss = {:.9}", self.best_dev_loss);
        let _ = writeln!(s, "# stopped_early = {}", self.stopped_early);
        s
    }
}

/// One back-end input in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub wave: Waveform,
    pub label: Label,
    /// Bona fide utterance the view derives from; groups contrastive positives.
    pub utt: String,
    pub class: ViewClass,
}

/// The parameters updated during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable<T> {
    pub encoder: EncoderWeights<T>,
    pub backend: Backend<T>,
}

impl<T> ParamTree<T> for Trainable<T> {
    type Mapped<U> = Trainable<U>;
    fn map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> Trainable<U> {
        Trainable {
            encoder: self.encoder.map(&join_name(p, "encoder"), f),
            backend: self.backend.map(&join_name(p, "backend"), f),
        }
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitMutFn<'_, T>) {
        self.encoder.visit_mut(&join_name(p, "encoder"), f);
        self.backend.visit_mut(&join_name(p, "backend"), f);
    }
}

impl Trainable<Mat> {
    pub fn of(model: &CMModel) -> Self {
        Self {
            encoder: model.encoder.weights.clone(),
            backend: model.backend.clone(),
        }
    }

    pub fn store(&self, model: &mut CMModel) {
        model.encoder.weights = self.encoder.clone();
        model.backend = self.backend.clone();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub ce: f64,
    pub cf: f64,
    pub dis: f64,
}

/// Gradient-free inputs of one view: frozen second-encoder output and teacher targets.
struct Frozen {
    encoder_b: Option<Mat>,
    targets: Vec<Mat>,
}

fn freeze(model: &CMModel, views: &[View], cfg: &TrainConfig) -> Result<Vec<Frozen>> {
    views
        .iter()
        .map(|v| {
            let encoder_b = match (model.mode, &model.encoder_b) {
                (CmMode::DualDiff, Some(b)) => Some(b.encode(&v.wave)?.values),
                _ => None,
            };
            let targets = match (model.mode, &model.teachers) {
                (CmMode::Distilled, Some(t)) if cfg.lambda_dis > 0.0 => {
                    distill_target(t.target, &t.a, &t.b, &v.wave)?
                        .into_iter()
                        .map(|f| f.values)
                        .collect()
                }
                (CmMode::Distilled, None) if cfg.lambda_dis > 0.0 => {
                    return Err(Error::config("distill", "distilled training needs loaded teachers"))
                }
                _ => Vec::new(),
            };
            Ok(Frozen { encoder_b, targets })
        })
        .collect()
}

struct Objective {
    total: Var,
    ce: Var,
    cf: Option<Var>,
    dis: Option<Var>,
}

fn objective(
    g: &mut Graph,
    vars: &Trainable<Var>,
    model: &CMModel,
    views: &[View],
    frozen: &[Frozen],
    cfg: &TrainConfig,
) -> Result<Objective> {
    let hidden = matches!(&model.teachers, Some(t) if t.target == DistillTarget::Hidden);
    let mut scores = Vec::with_capacity(views.len());
    let mut embs = Vec::with_capacity(views.len());
    let mut dis = Vec::new();
    for (v, fz) in views.iter().zip(frozen) {
        if v.wave.len() < RECEPTIVE_FIELD {
            return Err(Error::input(format!("view `{}` is shorter than the receptive field", v.wave.id)));
        }
        let pass = encoder_pass(g, &vars.encoder, &model.encoder.config, &v.wave.samples, None);
        let feats = match &fz.encoder_b {
            Some(b) => {
                let b = g.leaf(b.clone());
                g.sub(pass.output, b)
            }
            None => pass.output,
        };
        if !fz.targets.is_empty() {
            let zs: Vec<Var> = if hidden { pass.hidden.clone() } else { vec![pass.output] };
            let parts: Vec<Var> = zs
                .iter()
                .zip(&fz.targets)
                .map(|(&z, t)| distillation_loss_var(g, z, t))
                .collect();
            let cat = g.concat_rows(&parts);
            dis.push(g.mean_all(cat));
        }
        scores.push(vars.backend.forward(g, feats));
        embs.push(g.mean_rows(feats));
    }
    let logits = g.concat_rows(&scores);
    let targets: Vec<f64> = views.iter().map(|v| v.label.target()).collect();
    let ce = g.bce_with_logits(logits, &targets);
    let mut total = ce;
    let cf = if cfg.lambda_cf > 0.0 {
        let tags: Vec<(&str, ViewClass)> = views.iter().map(|v| (v.utt.as_str(), v.class)).collect();
        let e = g.concat_rows(&embs);
        let cf = contrastive_var(g, e, &tags, cfg.temperature)?;
        let w = g.scale(cf, cfg.lambda_cf);
        total = g.add(total, w);
        Some(cf)
    } else {
        None
    };
    let dis = if dis.is_empty() {
        None
    } else {
        let cat = g.concat_rows(&dis);
        let d = g.mean_all(cat);
        let w = g.scale(d, cfg.lambda_dis);
        total = g.add(total, w);
        Some(d)
    };
    Ok(Objective { total, ce, cf, dis })
}

fn run_batch(
    model: &CMModel,
    params: &Trainable<Mat>,
    views: &[View],
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<(BatchLoss, Option<Trainable<Mat>>)> {
    if views.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let frozen = freeze(model, views, cfg)?;
    let mut g = Graph::new();
    let vars = bind(&mut g, params);
    let o = objective(&mut g, &vars, model, views, &frozen, cfg)?;
    let loss = BatchLoss {
        total: g.scalar(o.total),
        ce: g.scalar(o.ce),
        cf: o.cf.map_or(0.0, |v| g.scalar(v)),
        dis: o.dis.map_or(0.0, |v| g.scalar(v)),
    };
    let grads = with_grads.then(|| {
        let gr = g.backward(o.total);
        collect_grads(&g, &gr, &vars)
    });
    Ok((loss, grads))
}

/// `ce + lambda_cf * cf + lambda_dis * dis` of one batch at the model's current weights.
pub fn batch_loss(model: &CMModel, views: &[View], cfg: &TrainConfig) -> Result<BatchLoss> {
    run_batch(model, &Trainable::of(model), views, cfg, false).map(|(l, _)| l)
}

/// Batch loss and its gradient with respect to the trainable encoder and back end.
pub fn batch_gradients(model: &CMModel, views: &[View], cfg: &TrainConfig) -> Result<(BatchLoss, Trainable<Mat>)> {
    let (l, g) = run_batch(model, &Trainable::of(model), views, cfg, true)?;
    Ok((l, g.expect("requested")))
}

/// Mean cross-entropy over full-length utterances.
pub fn dev_loss(model: &CMModel, waves: &[(Waveform, Label)]) -> Result<f64> {
    let mut sum = 0.0;
    for (w, label) in waves {
        sum += super::loss::cross_entropy_loss(cm_score(model, w)?, *label);
    }
    Ok(sum / waves.len() as f64)
}

fn crop(w: &Waveform, max_len: usize, rng: &mut ChaCha8Rng) -> Waveform {
    if w.len() <= max_len {
        return w.clone();
    }
    let start = rng.random_range(0..=w.len() - max_len);
    Waveform::new(w.id.clone(), w.samples[start..start + max_len].to_vec())
}

struct Pools {
    bona: Vec<Waveform>,
    spoof: Vec<Waveform>,
    /// Spoof indices per bona fide index.
    pairs: Vec<Vec<usize>>,
}

fn pools(bona: &DatasetManifest, spoof: &DatasetManifest, contrastive: bool) -> Result<Pools> {
    for (m, want) in [(bona, Label::Bonafide), (spoof, Label::Spoof)] {
        if let Some(e) = m.entries.iter().find(|e| e.label != want) {
            return Err(Error::input(format!("`{}` is labeled {}, expected {want}", e.id, e.label)));
        }
    }
    let bona_w = bona.load_all()?;
    let spoof_w = spoof.load_all()?;
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, w) in spoof_w.iter().enumerate() {
        by_source.entry(source_utt(&w.id)).or_default().push(i);
    }
    let pairs: Vec<Vec<usize>> = bona_w
        .iter()
        .map(|w| by_source.get(w.id.as_str()).cloned().unwrap_or_default())
        .collect();
    if contrastive {
        let missing: Vec<&str> = bona_w
            .iter()
            .zip(&pairs)
            .filter(|(_, p)| p.is_empty())
            .map(|(w, _)| w.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::input(format!(
                "contrastive batches need a vocoded counterpart for every bona fide utterance; missing: {}",
                missing.join(", ")
            )));
        }
    }
    Ok(Pools {
        bona: bona_w,
        spoof: spoof_w,
        pairs,
    })
}

fn view(w: Waveform, label: Label, utt: &str, class: ViewClass) -> View {
    View {
        wave: w,
        label,
        utt: utt.to_string(),
        class,
    }
}

/// Seeded batches of one epoch.
fn epoch_batches(p: &Pools, cfg: &TrainConfig, epoch: usize) -> Result<Vec<Vec<View>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    let max_len = (cfg.max_trunc_s * SAMPLE_RATE as f64) as usize;
    let aug = |w: &Waveform, rng: &mut ChaCha8Rng| -> Result<Waveform> {
        if cfg.aug_enabled {
            augment(w, &cfg.aug, rng.random())
        } else {
            Ok(w.clone())
        }
    };
    let mut batches = Vec::new();
    if cfg.lambda_cf > 0.0 {
        let mut order: Vec<usize> = (0..p.bona.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut views = Vec::with_capacity(4 * chunk.len());
            for &i in chunk {
                let b = &p.bona[i];
                let v = &p.spoof[*p.pairs[i].choose(&mut rng).expect("checked non-empty")];
                let bc = crop(b, max_len, &mut rng);
                let ba = aug(&bc, &mut rng)?;
                let vc = crop(v, max_len, &mut rng);
                let va = aug(&vc, &mut rng)?;
                views.push(view(bc, Label::Bonafide, &b.id, ViewClass::Bona));
                views.push(view(ba, Label::Bonafide, &b.id, ViewClass::Bona));
                views.push(view(vc, Label::Spoof, &b.id, ViewClass::Voc));
                views.push(view(va, Label::Spoof, &b.id, ViewClass::Voc));
            }
            batches.push(views);
        }
    } else {
        let mut items: Vec<(&Waveform, Label, ViewClass)> = p
            .bona
            .iter()
            .map(|w| (w, Label::Bonafide, ViewClass::Bona))
            .chain(p.spoof.iter().map(|w| (w, Label::Spoof, ViewClass::Voc)))
            .collect();
        items.shuffle(&mut rng);
        for chunk in items.chunks(cfg.batch_size) {
            let mut views = Vec::with_capacity(chunk.len());
            for &(w, label, class) in chunk {
                let c = crop(w, max_len, &mut rng);
                let a = aug(&c, &mut rng)?;
                let utt = match class {
                    ViewClass::Bona => w.id.as_str(),
                    ViewClass::Voc => source_utt(&w.id),
                };
                views.push(view(a, label, utt, class));
            }
            batches.push(views);
        }
    }
    if let Some(k) = cfg.batches_per_epoch {
        batches.truncate(k);
    }
    Ok(batches)
}

/// Fine-tunes encoder and back end; frozen encoders and teachers are never touched.
/// Returns the checkpoint with the lowest dev loss.
pub fn finetune(
    model: &CMModel,
    bona: &DatasetManifest,
    spoof: &DatasetManifest,
    cfg: &TrainConfig,
    dev: &DatasetManifest,
) -> Result<(CMModel, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    if model.mode == CmMode::Distilled && cfg.lambda_dis > 0.0 && model.teachers.is_none() {
        return Err(Error::config("distill", "distilled training needs loaded teachers"));
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::input("training manifests must be non-empty"));
    }
    if dev.is_empty() {
        return Err(Error::config("dev", "empty dev set"));
    }
    let train_ids: HashSet<&str> = bona.entries.iter().chain(&spoof.entries).map(|e| e.id.as_str()).collect();
    let overlap: Vec<&str> = dev
        .entries
        .iter()
        .map(|e| e.id.as_str())
        .filter(|id| train_ids.contains(id))
        .collect();
    if !overlap.is_empty() {
        return Err(Error::config("dev", format!("dev overlaps training data: {}", overlap.join(", "))));
    }
    let pools = pools(bona, spoof, cfg.lambda_cf > 0.0)?;
    let dev_w: Vec<(Waveform, Label)> = dev
        .load_all()?
        .into_iter()
        .zip(dev.entries.iter().map(|e| e.label))
        .collect();

    let mut current = model.clone();
    let mut params = Trainable::of(model);
    let mut opt = Adam::new(cfg.adam);
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let batches = epoch_batches(&pools, cfg, epoch)?;
        let (mut sum, mut n) = (BatchLoss { total: 0.0, ce: 0.0, cf: 0.0, dis: 0.0 }, 0usize);
        for (b, views) in batches.iter().enumerate() {
            let (loss, grads) = run_batch(&current, &params, views, cfg, true)?;
            if !loss.total.is_finite() {
                let ids: Vec<&str> = views.iter().map(|v| v.wave.id.as_str()).collect();
                return Err(Error::NonFinite {
                    value: loss.total,
                    context: format!(
                        "epoch {epoch} batch {b} (ce {}, cf {}, dis {}; utterances {})",
                        loss.ce,
                        loss.cf,
                        loss.dis,
                        ids.join(",")
                    ),
                });
            }
            opt.step(&mut params, &grads.expect("requested"), lr);
            params.store(&mut current);
            let k = views.len() as f64;
            sum.total += loss.total * k;
            sum.ce += loss.ce * k;
            sum.cf += loss.cf * k;
            sum.dis += loss.dis * k;
            n += views.len();
        }
        let dl = dev_loss(&current, &dev_w)?;
        if !dl.is_finite() {
            return Err(Error::NonFinite {
                value: dl,
                context: format!("dev loss after epoch {epoch}"),
            });
        }
        let n = n.max(1) as f64;
        report.epochs.push(EpochReport {
            epoch,
            lr,
            train_loss: sum.total / n,
            ce: sum.ce / n,
            cf: sum.cf / n,
            dis: sum.dis / n,
            dev_loss: dl,
        });
        log::info!("cm epoch {epoch}: train {:.5} dev {dl:.5}", sum.total / n);
        if stop.observe(epoch, dl) {
            best = current.clone();
        }
        if stop.should_stop(epoch) {
            report.stopped_early = true;
            break;
        }
    }
    report.best_epoch = stop.best_epoch.unwrap_or(0);
    report.best_dev_loss = stop.best;
    Ok((best, report))
}
