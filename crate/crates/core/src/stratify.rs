//! Cluster coherence: how well original features predict cluster
//! membership, and which features drive each cluster.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{surrogate_attributions, top_k, train_surrogate, BackgroundSet, SurrogateConfig};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::trainer::stratified_split;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StratifyConfig {
    pub test_fraction: f64,
    pub surrogate: SurrogateConfig,
    pub top_k: usize,
    pub n_coalitions: usize,
    pub background_size: usize,
    pub seed: u64,
}

impl Default for StratifyConfig {
    fn default() -> Self {
        StratifyConfig {
            test_fraction: 0.3,
            surrogate: SurrogateConfig::default(),
            top_k: 10,
            n_coalitions: 512,
            background_size: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub cluster: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-class precision, recall and F1 for `classes`, plus their macro
/// average. Undefined ratios count as 0.
pub fn classification_scores(truth: &[usize], predicted: &[usize], classes: &[usize]) -> (Vec<ClassScores>, f64) {
    let scores: Vec<ClassScores> = classes
        .iter()
        .map(|&c| {
            let tp = truth.iter().zip(predicted).filter(|(&t, &p)| t == c && p == c).count() as f64;
            let pred_c = predicted.iter().filter(|&&p| p == c).count() as f64;
            let support = truth.iter().filter(|&&t| t == c).count();
            let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                cluster: c,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let macro_f1 = scores.iter().map(|s| s.f1).sum::<f64>() / scores.len().max(1) as f64;
    (scores, macro_f1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Driver {
    pub feature: usize,
    pub name: String,
    pub mean_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDrivers {
    pub cluster: usize,
    pub size: usize,
    /// Fraction of label-1 samples in the cluster.
    pub label_rate: f64,
    pub drivers: Vec<Driver>,
}

/// Attributions of one cluster's output over its held-out members.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAttribution {
    pub cluster: usize,
    pub samples: Vec<usize>,
    pub values: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifyReport {
    pub n_clusters: usize,
    pub per_cluster: Vec<ClassScores>,
    pub macro_f1: f64,
    /// Clusters with no member in the training split.
    pub excluded: Vec<usize>,
    pub drivers: Vec<ClusterDrivers>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    #[serde(skip)]
    pub attributions: Vec<ClusterAttribution>,
}

impl StratifyReport {
    /// The cluster with the highest label-1 rate, ties to the lower id.
    pub fn most_enriched(&self) -> Option<&ClusterDrivers> {
        self.drivers
            .iter()
            .fold(None, |best: Option<&ClusterDrivers>, d| match best {
                Some(b) if b.label_rate >= d.label_rate => Some(b),
                _ => Some(d),
            })
    }
}

fn fit_and_score(
    x: &Matrix,
    clusters: &[usize],
    train: &[usize],
    test: &[usize],
    cfg: &StratifyConfig,
) -> Result<(crate::attribution::SurrogateModel, Vec<ClassScores>, f64, Vec<usize>)> {
    let n_clusters = clusters.iter().max().map_or(0, |m| m + 1);
    let train_y: Vec<usize> = train.iter().map(|&i| clusters[i]).collect();
    let model = train_surrogate(&x.select_rows(train), &train_y, &cfg.surrogate)?;
    let excluded: Vec<usize> = (0..n_clusters).filter(|c| !model.classes().contains(c)).collect();
    for c in &excluded {
        log::warn!("cluster {c} has no member in the training split and is excluded");
    }
    let truth: Vec<usize> = test.iter().map(|&i| clusters[i]).collect();
    let predicted = model.predict_class(&x.select_rows(test));
    let (scores, macro_f1) = classification_scores(&truth, &predicted, model.classes());
    Ok((model, scores, macro_f1, excluded))
}

/// Trains a surrogate from original features to cluster id on a 70/30
/// split stratified by label, scores it on the held-out part, and ranks the
/// features driving each cluster's one-vs-rest output by mean |φ| over the
/// cluster's held-out members.
pub fn cluster_coherence(
    x: &Matrix,
    feature_names: &[String],
    clusters: &[usize],
    labels: &[u8],
    cfg: &StratifyConfig,
) -> Result<StratifyReport> {
    if clusters.len() != x.rows() || labels.len() != x.rows() || feature_names.len() != x.cols() {
        return Err(Error::Dimension {
            op: "cluster coherence",
            left: x.shape(),
            right: (clusters.len(), feature_names.len()),
        });
    }
    let label_ids: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let (train, test) = stratified_split(&label_ids, cfg.test_fraction, cfg.seed)?;
    let (model, per_cluster, macro_f1, excluded) = fit_and_score(x, clusters, &train, &test, cfg)?;
    let background = BackgroundSet::stratified(x, labels, &train, cfg.background_size, cfg.seed)?;

    let mut drivers = Vec::new();
    let mut attributions = Vec::new();
    for &c in model.classes() {
        let members: Vec<usize> = (0..x.rows()).filter(|&i| clusters[i] == c).collect();
        let positives = members.iter().filter(|&&i| labels[i] == 1).count();
        let explained: Vec<usize> = test.iter().copied().filter(|&i| clusters[i] == c).collect();
        if explained.is_empty() {
            log::warn!("cluster {c} has no held-out member; no drivers reported");
            drivers.push(ClusterDrivers {
                cluster: c,
                size: members.len(),
                label_rate: positives as f64 / members.len().max(1) as f64,
                drivers: Vec::new(),
            });
            continue;
        }
        // binary surrogates only model the larger id; its complement shares
        // the same drivers
        let output = model.output_for_class(c).unwrap_or(0);
        let att = surrogate_attributions(
            &model,
            output,
            &x.select_rows(&explained),
            &background,
            cfg.n_coalitions.max(x.cols() + 2),
            cfg.seed,
        )?;
        let mean_abs = att.mean_abs();
        attributions.push(ClusterAttribution {
            cluster: c,
            samples: explained,
            values: att.values,
        });
        drivers.push(ClusterDrivers {
            cluster: c,
            size: members.len(),
            label_rate: positives as f64 / members.len().max(1) as f64,
            drivers: top_k(&mean_abs, cfg.top_k)
                .into_iter()
                .map(|j| Driver {
                    feature: j,
                    name: feature_names[j].clone(),
                    mean_abs: mean_abs[j],
                })
                .collect(),
        });
    }
    Ok(StratifyReport {
        n_clusters: clusters.iter().max().map_or(0, |m| m + 1),
        per_cluster,
        macro_f1,
        excluded,
        drivers,
        train_indices: train,
        test_indices: test,
        attributions,
    })
}

/// Macro-F1 of the same classifier after randomly permuting cluster ids.
pub fn shuffled_control(x: &Matrix, clusters: &[usize], labels: &[u8], cfg: &StratifyConfig) -> Result<f64> {
    let mut shuffled = clusters.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let label_ids: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let (train, test) = stratified_split(&label_ids, cfg.test_fraction, cfg.seed)?;
    Ok(fit_and_score(x, &shuffled, &train, &test, cfg)?.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_by_hand() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0, 1, 1, 1, 0, 2];
        let (s, m) = classification_scores(&truth, &pred, &[0, 1, 2]);
        // class 0: p = 1/2, r = 1/2; class 1: p = 2/3, r = 1; class 2: p = 1, r = 1/2
        assert!((s[0].f1 - 0.5).abs() < 1e-15);
        assert!((s[1].f1 - 0.8).abs() < 1e-15);
        assert!((s[2].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m - (0.5 + 0.8 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn separable_clusters_are_coherent_with_planted_drivers() {
        // cluster c shifts feature 2c
        let n = 150;
        let clusters: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 5 == 0)).collect();
        let x = Matrix::from_fn(n, 8, |i, j| {
            let noise = (((i * 7919 + j * 104_729) % 1000) as f64 / 1000.0 - 0.5) * 0.5;
            noise + if j == 2 * clusters[i] { 3.0 } else { 0.0 }
        });
        let names: Vec<String> = (0..8).map(|j| format!("g{j}")).collect();
        let cfg = StratifyConfig {
            n_coalitions: 256,
            background_size: 20,
            ..StratifyConfig::default()
        };
        let r = cluster_coherence(&x, &names, &clusters, &labels, &cfg).unwrap();
        assert!(r.macro_f1 > 0.95, "{}", r.macro_f1);
        for d in &r.drivers {
            assert_eq!(d.drivers[0].feature, 2 * d.cluster);
        }
        assert!(shuffled_control(&x, &clusters, &labels, &cfg).unwrap() < 0.6);
    }
}
