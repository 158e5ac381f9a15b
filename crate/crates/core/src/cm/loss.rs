//! Cross-entropy, supervised contrastive feature loss, and their weighted sum.

use crate::autodiff::{softplus, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::manifest::Label;

use super::train::TrainConfig;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewClass {
    Bona,
    Voc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEmbedding {
    pub embedding: Vec<f64>,
    pub utt: String,
    pub class: ViewClass,
}

/// Positives of each anchor: the other views of the same utterance and class.
pub fn positive_sets<S: AsRef<str>>(tags: &[(S, ViewClass)]) -> Result<Vec<Vec<usize>>> {
    if tags.len() < 2 {
        return Err(Error::input("contrastive loss needs at least 2 embeddings"));
    }
    tags.iter()
        .enumerate()
        .map(|(a, (ua, ca))| {
            let p: Vec<usize> = tags
                .iter()
                .enumerate()
                .filter(|(b, (ub, cb))| *b != a && ub.as_ref() == ua.as_ref() && cb == ca)
                .map(|(b, _)| b)
                .collect();
            if p.is_empty() {
                Err(Error::input(format!(
                    "anchor {a} ({}, {ca:?}) has no positive view in the batch",
                    ua.as_ref()
                )))
            } else {
                Ok(p)
            }
        })
        .collect()
}

/// Supervised contrastive loss over L2-normalized rows of `emb` (`k x D`).
pub fn contrastive_var<S: AsRef<str>>(
    g: &mut Graph,
    emb: Var,
    tags: &[(S, ViewClass)],
    temperature: f64,
) -> Result<Var> {
    let positives = positive_sets(tags)?;
    let n = g.normalize_rows(emb);
    let nt = g.transpose(n);
    let sim = g.matmul(n, nt);
    Ok(g.supcon(sim, &positives, temperature))
}

pub fn contrastive_feature_loss(views: &[ViewEmbedding], temperature: f64) -> Result<f64> {
    let d = views.first().map_or(0, |v| v.embedding.len());
    if views.iter().any(|v| v.embedding.len() != d) {
        return Err(Error::input("embeddings differ in dimension"));
    }
    let tags: Vec<(&str, ViewClass)> = views.iter().map(|v| (v.utt.as_str(), v.class)).collect();
    let positives = positive_sets(&tags)?;
    let data: Vec<f64> = views.iter().flat_map(|v| v.embedding.iter().copied()).collect();
    let mut g = Graph::new();
    let e = g.leaf(Mat::from_shape_vec((views.len(), d), data).expect("rectangular"));
    let n = g.normalize_rows(e);
    let nt = g.transpose(n);
    let sim = g.matmul(n, nt);
    let loss = g.supcon(sim, &positives, temperature);
    Ok(g.scalar(loss))
}

/// Binary cross-entropy of `sigmoid(score)` with bona fide as the positive class.
pub fn cross_entropy_loss(score: f64, label: Label) -> f64 {
    softplus(score) - label.target() * score
}

pub fn total_loss(ce: f64, cf: f64, dis: f64, cfg: &TrainConfig) -> f64 {
    ce + cfg.lambda_cf * cf + cfg.lambda_dis * dis
}
