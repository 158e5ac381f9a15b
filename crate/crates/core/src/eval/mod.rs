//! Scoring, equal error rates, multi-round aggregation and feature-difference diagnostics.

mod diag;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::cm::{cm_score, CMModel};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Label};

pub use diag::{
    feature_diff_histogram, feature_trajectory_export, DimSelect, Histogram, Trajectory,
};

/// Name of the all-sets row in reports.
pub const POOLED: &str = "Pooled";

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub set_name: String,
    pub label: Label,
    /// Higher means more likely bona fide.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub n_bona: usize,
    pub n_spoof: usize,
}

/// One record per manifest entry, full length, in manifest order.
pub fn score_dataset(model: &CMModel, manifest: &DatasetManifest, set_name: &str) -> Result<Vec<ScoreRecord>> {
    if manifest.is_empty() {
        return Err(Error::input(format!("nothing to score in `{set_name}`")));
    }
    if set_name.is_empty() {
        return Err(Error::input("set name must be non-empty"));
    }
    let waves = manifest.load_all()?;
    manifest
        .entries
        .iter()
        .zip(&waves)
        .map(|(e, w)| {
            Ok(ScoreRecord {
                id: e.id.clone(),
                set_name: set_name.to_string(),
                label: e.label,
                score: cm_score(model, w)?,
            })
        })
        .collect()
}

/// EER with spoof accepted when `score >= t` and bona fide rejected when `score < t`.
///
/// Thresholds sweep every distinct score plus `-inf` and `+inf`. When `FAR - FRR` changes sign
/// between adjacent thresholds, both rates are interpolated linearly to the crossing.
pub fn compute_eer(records: &[ScoreRecord]) -> Result<EerResult> {
    let mut bona: Vec<f64> = Vec::new();
    let mut spoof: Vec<f64> = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::input(format!("score of `{}` is not finite", r.id)));
        }
        match r.label {
            Label::Bonafide => bona.push(r.score),
            Label::Spoof => spoof.push(r.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::input(format!(
            "EER needs both classes, got {} bona fide and {} spoof",
            bona.len(),
            spoof.len()
        )));
    }
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    // Sorted inputs let both rates advance monotonically with the threshold.
    let (mut ib, mut is) = (0usize, 0usize);
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &thresholds {
        while ib < bona.len() && bona[ib] < t {
            ib += 1;
        }
        while is < spoof.len() && spoof[is] < t {
            is += 1;
        }
        let far = (spoof.len() - is) as f64 / ns;
        let frr = ib as f64 / nb;
        let d = far - frr;
        if d <= 0.0 {
            let (eer, threshold) = match prev {
                Some((pt, pfar, pfrr)) if d < 0.0 => {
                    let pd = pfar - pfrr;
                    let a = pd / (pd - d);
                    let eer = pfar + a * (far - pfar);
                    let th = match (pt.is_finite(), t.is_finite()) {
                        (true, true) => pt + a * (t - pt),
                        (true, false) => pt,
                        _ => t,
                    };
                    (eer, th)
                }
                _ => (far, t),
            };
            return Ok(EerResult {
                eer,
                threshold,
                n_bona: bona.len(),
                n_spoof: spoof.len(),
            });
        }
        prev = Some((t, far, frr));
    }
    unreachable!("FAR - FRR is -1 at +inf")
}

/// One global threshold over the union of all sets.
pub fn pooled_eer(record_sets: &[Vec<ScoreRecord>]) -> Result<EerResult> {
    let all: Vec<ScoreRecord> = record_sets.iter().flatten().cloned().collect();
    compute_eer(&all)
}

/// Per-set results of one round plus the pooled result.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub seed: u64,
    pub per_set: BTreeMap<String, EerResult>,
    pub pooled: EerResult,
}

impl RoundResult {
    pub fn from_records(seed: u64, sets: &[(String, Vec<ScoreRecord>)]) -> Result<Self> {
        let mut per_set = BTreeMap::new();
        for (name, recs) in sets {
            per_set.insert(name.clone(), compute_eer(recs)?);
        }
        let pooled = pooled_eer(&sets.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>())?;
        Ok(Self { seed, per_set, pooled })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRoundReport {
    pub rounds: Vec<RoundResult>,
    /// Arithmetic mean EER per set, `Pooled` included.
    pub mean: BTreeMap<String, f64>,
}

/// Runs one round per seed and averages the EERs; a failing round aborts with its index.
pub fn multi_round<F>(seeds: &[u64], mut run_round: F) -> Result<MultiRoundReport>
where
    F: FnMut(usize, u64) -> Result<Vec<(String, Vec<ScoreRecord>)>>,
{
    if seeds.is_empty() {
        return Err(Error::config("eval.seeds", "need at least one round"));
    }
    let mut rounds = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let wrap = |e: Error| Error::Round {
            round: i,
            source: Box::new(e),
        };
        let sets = run_round(i, seed).map_err(wrap)?;
        rounds.push(RoundResult::from_records(seed, &sets).map_err(wrap)?);
    }
    let mut mean: BTreeMap<String, f64> = BTreeMap::new();
    for r in &rounds {
        for (name, e) in &r.per_set {
            *mean.entry(name.clone()).or_default() += e.eer;
        }
        *mean.entry(POOLED.to_string()).or_default() += r.pooled.eer;
    }
    let k = rounds.len() as f64;
    mean.values_mut().for_each(|v| *v /= k);
    Ok(MultiRoundReport { rounds, mean })
}

fn report_row(s: &mut String, name: &str, e: &EerResult) {
    let _ = writeln!(
        s,
        "{name}\t{:.2}\t{:.9e}\t{}\t{}",
        e.eer * 100.0,
        e.threshold,
        e.n_bona,
        e.n_spoof
    );
}

const REPORT_HEADER: &str = "set\teer_pct\tthreshold\tn_bona\tn_spoof\n";

/// One row per set plus `Pooled`.
pub fn eer_report(round: &RoundResult) -> String {
    let mut s = String::from(REPORT_HEADER);
    for (name, e) in &round.per_set {
        report_row(&mut s, name, e);
    }
    report_row(&mut s, POOLED, &round.pooled);
    s
}

impl MultiRoundReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.rounds.iter().enumerate() {
            let _ = writeln!(s, "# round {i} seed {}", r.seed);
            s.push_str(&eer_report(r));
        }
        let _ = writeln!(s, "# mean over {} rounds", self.rounds.len());
        s.push_str("set\teer_pct\n");
        let pooled = self.mean.get(POOLED);
        for (name, v) in self.mean.iter().filter(|(n, _)| n.as_str() != POOLED) {
            let _ = writeln!(s, "{name}\t{:.2}", v * 100.0);
        }
        if let Some(v) = pooled {
            let _ = writeln!(s, "{POOLED}\t{:.2}", v * 100.0);
        }
        s
    }
}

/// TAB-separated `id set_name label score`; scores keep 17 significant digits.
pub fn scores_to_text(records: &[ScoreRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{}\t{:.16e}", r.id, r.set_name, r.label, r.score);
    }
    s
}

pub fn parse_scores(text: &str, origin: &Path) -> Result<Vec<ScoreRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |msg: String| Error::format(origin, format!("line {}: {msg}", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let label: Label = f[2].parse().map_err(|e: Error| bad(e.to_string()))?;
            let score: f64 = f[3].parse().map_err(|_| bad(format!("bad score `{}`", f[3])))?;
            if !score.is_finite() || f[1].is_empty() {
                return Err(bad("score must be finite and set name non-empty".into()));
            }
            Ok(ScoreRecord {
                id: f[0].to_string(),
                set_name: f[1].to_string(),
                label,
                score,
            })
        })
        .collect()
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    std::fs::write(path, scores_to_text(records)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

/// Records grouped by set name, sets in first-appearance order.
pub fn group_by_set(records: &[ScoreRecord]) -> Vec<(String, Vec<ScoreRecord>)> {
    let mut out: Vec<(String, Vec<ScoreRecord>)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(n, _)| *n == r.set_name) {
            Some((_, v)) => v.push(r.clone()),
            None => out.push((r.set_name.clone(), vec![r.clone()])),
        }
    }
    out
}

#[cfg(test)]
mod tests;
