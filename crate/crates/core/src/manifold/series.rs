use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scores::{calinski_harabasz, lowess, minmax_normalize, silhouette};
use super::umap::{embed_2d, Embedding2D, UmapConfig};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const LOWESS_FRAC: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Label,
    Domain,
}

impl LabelKind {
    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Label => "label",
            LabelKind::Domain => "domain",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Silhouette,
    CalinskiHarabasz,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Silhouette => "silhouette",
            Metric::CalinskiHarabasz => "calinski_harabasz",
        }
    }
}

/// One clustering score tracked over epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub label_kind: LabelKind,
    pub metric: Metric,
    pub epochs: Vec<usize>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// LOWESS of the normalised curve; a copy of it with fewer than 3 epochs.
    pub smoothed: Vec<f64>,
}

impl MetricCurve {
    /// First epoch whose raw value reaches `fraction` of the final value.
    pub fn first_reaching(&self, fraction: f64) -> Option<usize> {
        let target = fraction * self.raw.last()?;
        self.epochs.iter().zip(&self.raw).find(|(_, &v)| v >= target).map(|(&e, _)| e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub embeddings: Vec<(usize, Embedding2D)>,
    pub curves: Vec<MetricCurve>,
}

/// Both scores against both labelings of one 2-D embedding.
pub fn score_embedding(coords: &Matrix, label: &[usize], domain: &[usize]) -> Result<[(LabelKind, Metric, f64); 4]> {
    Ok([
        (LabelKind::Label, Metric::Silhouette, silhouette(coords, label)?),
        (LabelKind::Label, Metric::CalinskiHarabasz, calinski_harabasz(coords, label)?),
        (LabelKind::Domain, Metric::Silhouette, silhouette(coords, domain)?),
        (LabelKind::Domain, Metric::CalinskiHarabasz, calinski_harabasz(coords, domain)?),
    ])
}

/// Min-max normalises and LOWESS-smooths each of the four score slots
/// across epochs.
pub fn build_curves(epochs: &[usize], scores: &[[(LabelKind, Metric, f64); 4]], frac: f64) -> Result<Vec<MetricCurve>> {
    if scores.is_empty() || scores.len() != epochs.len() {
        return Err(Error::Dimension {
            op: "build_curves",
            left: (epochs.len(), 1),
            right: (scores.len(), 4),
        });
    }
    let xs: Vec<f64> = epochs.iter().map(|&e| e as f64).collect();
    (0..4)
        .map(|slot| {
            let (label_kind, metric, _) = scores[0][slot];
            let raw: Vec<f64> = scores.iter().map(|s| s[slot].2).collect();
            let normalized = minmax_normalize(&raw);
            let smoothed = if raw.len() >= 3 {
                lowess(&xs, &normalized, frac)?
            } else {
                normalized.clone()
            };
            Ok(MetricCurve {
                label_kind,
                metric,
                epochs: epochs.to_vec(),
                raw,
                normalized,
                smoothed,
            })
        })
        .collect()
}

/// Embeds each epoch's matrix, scores it against both labelings, then
/// min-max normalises and smooths every curve. Epochs run in parallel.
pub fn score_series(
    snapshots: &[(usize, Matrix)],
    label: &[usize],
    domain: &[usize],
    umap: &UmapConfig,
    frac: f64,
) -> Result<ScoreSeries> {
    if snapshots.is_empty() {
        return Err(Error::Contract("score_series needs at least one snapshot".into()));
    }
    if label.len() != domain.len() {
        return Err(Error::Dimension {
            op: "score_series labels",
            left: (label.len(), 1),
            right: (domain.len(), 1),
        });
    }
    let per_epoch: Vec<(Embedding2D, [(LabelKind, Metric, f64); 4])> = snapshots
        .par_iter()
        .map(|(_, m)| {
            let emb = embed_2d(m, umap)?;
            let scores = score_embedding(&emb.coords, label, domain)?;
            Ok((emb, scores))
        })
        .collect::<Result<_>>()?;
    let epochs: Vec<usize> = snapshots.iter().map(|s| s.0).collect();
    let scores: Vec<_> = per_epoch.iter().map(|p| p.1).collect();
    let curves = build_curves(&epochs, &scores, frac)?;
    Ok(ScoreSeries {
        embeddings: epochs.into_iter().zip(per_epoch.into_iter().map(|p| p.0)).collect(),
        curves,
    })
}
