//! Differential-feature histograms and per-frame trajectories for plotting.

use std::fmt::Write as _;

use crate::audio::Waveform;
use crate::autodiff::Mat;
use crate::distill::{diff_features, DiffMode};
use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::sslcore::EncoderParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `n_bins + 1` ascending edges, symmetric about zero.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("lo\thi\tcount\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{:.9e}\t{:.9e}\t{c}", self.edges[i], self.edges[i + 1]);
        }
        s
    }
}

/// Bin of `x` in `n` equal bins over `[-r, r]`; negative values use the mirrored bin of `-x`
/// so that negating every value reverses the counts exactly.
fn bin_of(x: f64, r: f64, n: usize) -> usize {
    if x < 0.0 {
        return n - 1 - bin_of(-x, r, n);
    }
    let u = (x / r + 1.0) * 0.5 * n as f64;
    (u.floor() as usize).min(n - 1)
}

/// Signed `encode(a) - encode(b)` pooled over all frames, dimensions and utterances.
///
/// `n_bins` must be odd so that zero sits in the middle of the central bin.
pub fn feature_diff_histogram(
    enc_a: &EncoderParams,
    enc_b: &EncoderParams,
    manifest: &DatasetManifest,
    n_bins: usize,
) -> Result<Histogram> {
    if n_bins == 0 || n_bins % 2 == 0 {
        return Err(Error::config("eval.n_bins", "must be odd and >= 1"));
    }
    if enc_a.config.dim != enc_b.config.dim {
        return Err(Error::input(format!(
            "encoders differ in dimension: {} vs {}",
            enc_a.config.dim, enc_b.config.dim
        )));
    }
    let mut values = Vec::new();
    for w in &manifest.load_all()? {
        let d = diff_features(&enc_a.encode(w)?, &enc_b.encode(w)?, DiffMode::Signed)?;
        values.extend(d.values.iter().copied());
    }
    let r = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let r = if r > 0.0 { r } else { 1.0 };
    let edges = (0..=n_bins)
        .map(|i| -r + 2.0 * r * i as f64 / n_bins as f64)
        .collect();
    let mut counts = vec![0u64; n_bins];
    for v in values {
        counts[bin_of(v, r, n_bins)] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimSelect {
    /// Dimension whose first-minus-second difference varies most over the utterance.
    MaxDiffVariance,
    Index(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    /// True when every difference dimension had zero variance and index 0 was used.
    pub fallback: bool,
    /// Encoder names followed by `diff`.
    pub columns: Vec<String>,
    /// `N x (encoders + 1)`.
    pub values: Mat,
}

impl Trajectory {
    pub fn to_text(&self) -> String {
        let mut s = format!("# dim = {}\nframe\t{}\n", self.dim, self.columns.join("\t"));
        for (i, row) in self.values.outer_iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            let _ = writeln!(s, "{i}\t{}", cells.join("\t"));
        }
        s
    }
}

fn variance(col: ndarray::ArrayView1<'_, f64>) -> f64 {
    let n = col.len() as f64;
    let m = col.sum() / n;
    col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

/// One feature dimension per encoder over the frames of `w`, plus the first-minus-second
/// difference.
pub fn feature_trajectory_export(
    encoders: &[(String, &EncoderParams)],
    w: &Waveform,
    dim_select: DimSelect,
) -> Result<Trajectory> {
    if encoders.len() < 2 {
        return Err(Error::input("trajectory export needs at least two encoders"));
    }
    let d = encoders[0].1.config.dim;
    if let Some((name, e)) = encoders.iter().find(|(_, e)| e.config.dim != d) {
        return Err(Error::input(format!("encoder `{name}` has dim {}, expected {d}", e.config.dim)));
    }
    let feats = encoders
        .iter()
        .map(|(_, e)| e.encode(w))
        .collect::<Result<Vec<_>>>()?;
    let diff = &feats[0].values - &feats[1].values;
    let (dim, fallback) = match dim_select {
        DimSelect::Index(i) if i >= d => {
            return Err(Error::input(format!("dimension {i} out of range for D = {d}")))
        }
        DimSelect::Index(i) => (i, false),
        DimSelect::MaxDiffVariance => {
            let vars: Vec<f64> = diff.columns().into_iter().map(variance).collect();
            let (best, &v) = vars
                .iter()
                .enumerate()
                .fold((0, &vars[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            if v > 0.0 {
                (best, false)
            } else {
                log::warn!("differential features have zero variance; exporting dimension 0");
                (0, true)
            }
        }
    };
    let n = diff.nrows();
    let mut values = Mat::zeros((n, encoders.len() + 1));
    for (j, f) in feats.iter().enumerate() {
        values.column_mut(j).assign(&f.values.column(dim));
    }
    values.column_mut(encoders.len()).assign(&diff.column(dim));
    let mut columns: Vec<String> = encoders.iter().map(|(n, _)| n.clone()).collect();
    columns.push("diff".into());
    Ok(Trajectory {
        dim,
        fallback,
        columns,
        values,
    })
}
