//! Run report and figure-data bundle. Every summary number is recomputed
//! from artifacts on disk, so a report reflects whatever the run directory
//! currently holds.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use advrep_core::attribution::violin_transform;
use advrep_core::data::Dataset;
use advrep_core::manifold::silhouette;
use advrep_core::stratify::{ClassScores, ClusterDrivers};

use crate::artifacts::*;
use crate::error::CliResult;
use crate::stages::{vanilla_name, Context, LeidenSummary, StratifyArtifact};
use crate::Stage;

/// JSON schema the report validates against.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");
pub const REPORT_FORMAT: &str = "advrep-report";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub complete: bool,
    /// Paths relative to the run directory; only files that exist.
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub final_epoch: usize,
    pub train_label_acc: f64,
    pub val_label_acc: f64,
    pub train_domain_acc: f64,
    pub val_domain_acc: f64,
    /// Highest validation domain accuracy over epochs 1..=10.
    pub early_peak_val_domain_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSummary {
    pub manifold: String,
    pub label_silhouette: f64,
    pub domain_silhouette: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub n_clusters: usize,
    pub resolution: f64,
    pub k: usize,
    pub macro_f1: Option<f64>,
    pub control_macro_f1: Option<f64>,
    pub per_cluster: Vec<ClassScores>,
    pub drivers: Vec<ClusterDrivers>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: Option<AccuracySummary>,
    pub manifolds: Vec<ManifoldSummary>,
    pub clustering: Option<ClusteringSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub config: Value,
    pub stages: Vec<StageStatus>,
    pub missing_stages: Vec<String>,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTable {
    pub ids: Vec<String>,
    pub label: Vec<u8>,
    pub domain: Vec<usize>,
    pub domain_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPoint {
    pub epoch: usize,
    pub split: String,
    pub label_loss: f64,
    pub label_acc: f64,
    pub domain_loss: f64,
    pub domain_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub layer: String,
    pub source: String,
    pub label_kind: String,
    pub metric: String,
    pub epochs: Vec<usize>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub smoothed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolinFeature {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterViolins {
    pub cluster: usize,
    pub samples: Vec<String>,
    pub features: Vec<ViolinFeature>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolinParams {
    pub alpha: f64,
    pub base: f64,
    pub eps: f64,
}

/// Plot-ready series. Embeddings carry coordinates only; color them with
/// `samples.label`, `samples.domain` or `clusters`, all in sample order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureData {
    pub samples: Option<SampleTable>,
    pub training: Vec<TrainingPoint>,
    pub metric_curves: Vec<CurveSeries>,
    pub embeddings: Vec<EmbeddingSeries>,
    pub clusters: Option<Vec<usize>>,
    pub violin: ViolinParams,
    pub violins: Vec<ClusterViolins>,
}

fn parse<T: std::str::FromStr>(s: &str, path: &std::path::Path, row: usize, col: usize) -> CliResult<T> {
    s.parse().map_err(|_| {
        advrep_core::Error::Parse {
            row,
            col,
            msg: format!("bad value `{s}` in {}", path.display()),
        }
        .into()
    })
}

impl Context {
    /// Files a complete stage leaves behind, given the config.
    fn expected_artifacts(&self, stage: Stage) -> Vec<PathBuf> {
        let run = &self.run;
        let cfg = &self.cfg;
        let layers = &cfg.attribution.layers;
        let epochs = &cfg.snapshot_epochs;
        let grid = || layers.iter().flat_map(|&l| epochs.iter().map(move |&e| (l, e)));
        match stage {
            Stage::Synth => vec![run.expression(), run.labels()],
            Stage::Train => {
                let mut v = vec![run.checkpoint(), run.metrics(), run.split()];
                v.extend(grid().map(|(l, e)| run.activations(l, e)));
                if cfg.cross_validate {
                    v.extend([run.cv(), run.cv_metrics()]);
                }
                v
            }
            Stage::Attribute => {
                let mut v: Vec<PathBuf> = grid().map(|(l, e)| run.shap(l, e)).collect();
                v.extend(cfg.attribution.vanilla.iter().map(|m| run.vanilla(vanilla_name(m))));
                v.push(run.attribution_summary());
                v
            }
            Stage::Embed => {
                let mut v = vec![run.embedding(INPUT_EMBEDDING)];
                v.extend(self.embedding_jobs().into_iter().map(|j| run.embedding(&j.0)));
                v
            }
            Stage::Score => vec![run.scores(), run.manifold_scores()],
            Stage::Leiden => vec![run.clusters(), run.leiden_summary()],
            Stage::Stratify => vec![run.stratify_report(), run.drivers()],
            Stage::Report => vec![run.schema(), run.figure_data(), run.report()],
        }
    }

    fn stage_status(&self, stage: Stage) -> StageStatus {
        let expected = self.expected_artifacts(stage);
        let mut present: Vec<PathBuf> = expected.iter().filter(|p| p.is_file()).cloned().collect();
        if stage == Stage::Synth && self.run.planted().is_file() {
            present.push(self.run.planted());
        }
        if stage == Stage::Stratify {
            let dir = self.run.root().join("stratify/attributions");
            if let Ok(entries) = std::fs::read_dir(&dir) {
                let mut extra: Vec<PathBuf> = entries.flatten().map(|e| e.path()).filter(|p| p.is_file()).collect();
                extra.sort();
                present.extend(extra);
            }
        }
        // The report's own files are written right after this listing.
        let complete = stage == Stage::Report || expected.iter().all(|p| p.is_file());
        let artifacts = if stage == Stage::Report { expected } else { present };
        StageStatus {
            stage: stage.name().to_string(),
            complete,
            artifacts: artifacts.iter().map(|p| self.run.relative(p)).collect(),
        }
    }

    fn training_points(&self) -> CliResult<Vec<TrainingPoint>> {
        let path = self.run.metrics();
        if !path.is_file() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for (r, row) in read_rows(&path, Stage::Train)?.iter().enumerate() {
            if row.len() != 7 || row[1] != "holdout" {
                continue;
            }
            let f = |c: usize| parse::<f64>(&row[c], &path, r + 2, c + 1);
            out.push(TrainingPoint {
                epoch: parse(&row[0], &path, r + 2, 1)?,
                split: row[2].clone(),
                label_loss: f(3)?,
                label_acc: f(4)?,
                domain_loss: f(5)?,
                domain_acc: f(6)?,
            });
        }
        Ok(out)
    }

    fn manifold_names(&self) -> Vec<String> {
        let last = self.cfg.final_epoch();
        let mut names = vec![INPUT_EMBEDDING.to_string()];
        for &l in &self.cfg.attribution.layers {
            names.push(raw_embedding_name(l, last));
            names.push(shap_embedding_name(l, last));
        }
        for m in &self.cfg.attribution.vanilla {
            names.push(vanilla_embedding_name(vanilla_name(m)));
        }
        names
    }

    fn manifold_summaries(&self, data: &Dataset) -> CliResult<Vec<ManifoldSummary>> {
        let labels = data.labels_usize();
        let mut out = Vec::new();
        for name in self.manifold_names() {
            let path = self.run.embedding(&name);
            if !path.is_file() {
                continue;
            }
            let coords = read_matrix(&path, Stage::Embed)?;
            if coords.row_ids != data.sample_ids {
                return Err(advrep_core::Error::Label(format!("{} does not match the sample order", path.display())).into());
            }
            out.push(ManifoldSummary {
                manifold: name,
                label_silhouette: silhouette(&coords.values, &labels)?,
                domain_silhouette: silhouette(&coords.values, &data.domain)?,
            });
        }
        Ok(out)
    }

    fn clustering_summary(&self) -> CliResult<Option<ClusteringSummary>> {
        if !self.run.leiden_summary().is_file() {
            return Ok(None);
        }
        let leiden: LeidenSummary = read_json(&self.run.leiden_summary(), Stage::Leiden)?;
        let strat: Option<StratifyArtifact> = if self.run.stratify_report().is_file() {
            Some(read_json(&self.run.stratify_report(), Stage::Stratify)?)
        } else {
            None
        };
        Ok(Some(ClusteringSummary {
            n_clusters: leiden.n_clusters,
            resolution: leiden.resolution,
            k: leiden.k,
            macro_f1: strat.as_ref().map(|s| s.report.macro_f1),
            control_macro_f1: strat.as_ref().map(|s| s.control_macro_f1),
            per_cluster: strat.as_ref().map(|s| s.report.per_cluster.clone()).unwrap_or_default(),
            drivers: strat.map(|s| s.report.drivers).unwrap_or_default(),
        }))
    }

    fn curve_series(&self) -> CliResult<Vec<CurveSeries>> {
        let path = self.run.scores();
        if !path.is_file() {
            return Ok(Vec::new());
        }
        let mut out: Vec<CurveSeries> = Vec::new();
        for (r, row) in read_rows(&path, Stage::Score)?.iter().enumerate() {
            let f = |c: usize| parse::<f64>(&row[c], &path, r + 2, c + 1);
            let key = (&row[1], &row[2], &row[3], &row[4]);
            let fresh = out
                .last()
                .is_none_or(|c| (&c.layer, &c.source, &c.label_kind, &c.metric) != key);
            if fresh {
                out.push(CurveSeries {
                    layer: row[1].clone(),
                    source: row[2].clone(),
                    label_kind: row[3].clone(),
                    metric: row[4].clone(),
                    epochs: Vec::new(),
                    raw: Vec::new(),
                    normalized: Vec::new(),
                    smoothed: Vec::new(),
                });
            }
            let c = out.last_mut().expect("pushed above");
            c.epochs.push(parse(&row[0], &path, r + 2, 1)?);
            c.raw.push(f(5)?);
            c.normalized.push(f(6)?);
            c.smoothed.push(f(7)?);
        }
        Ok(out)
    }

    fn embedding_series(&self) -> CliResult<Vec<EmbeddingSeries>> {
        let mut names = vec![INPUT_EMBEDDING.to_string()];
        names.extend(self.embedding_jobs().into_iter().map(|j| j.0));
        let mut out = Vec::new();
        for name in names {
            let path = self.run.embedding(&name);
            if !path.is_file() {
                continue;
            }
            let m = read_matrix(&path, Stage::Embed)?.values;
            out.push(EmbeddingSeries {
                name,
                x: m.column(0),
                y: m.column(1),
            });
        }
        Ok(out)
    }

    fn violins(&self) -> CliResult<Vec<ClusterViolins>> {
        if !self.run.stratify_report().is_file() {
            return Ok(Vec::new());
        }
        let strat: StratifyArtifact = read_json(&self.run.stratify_report(), Stage::Stratify)?;
        let r = &self.cfg.report;
        let mut out = Vec::new();
        for d in &strat.report.drivers {
            let path = self.run.cluster_attributions(d.cluster);
            if !path.is_file() {
                continue;
            }
            let att = read_matrix(&path, Stage::Stratify)?;
            let t = violin_transform(&att.values, r.violin_alpha, r.violin_base, r.violin_eps)?;
            out.push(ClusterViolins {
                cluster: d.cluster,
                samples: att.row_ids.clone(),
                features: d
                    .drivers
                    .iter()
                    .map(|f| ViolinFeature {
                        name: f.name.clone(),
                        values: t.column(f.feature),
                    })
                    .collect(),
            });
        }
        Ok(out)
    }

    pub fn build_report(&self) -> CliResult<(RunReport, FigureData)> {
        let data = if self.run.expression().is_file() && self.run.labels().is_file() {
            Some(self.load_dataset()?)
        } else {
            None
        };
        let stages: Vec<StageStatus> = Stage::ALL.iter().map(|&s| self.stage_status(s)).collect();
        let missing_stages = stages.iter().filter(|s| !s.complete).map(|s| s.stage.clone()).collect();

        let training = self.training_points()?;
        let accuracy = accuracy_summary(&training);
        let manifolds = match &data {
            Some(d) => self.manifold_summaries(d)?,
            None => Vec::new(),
        };
        let clustering = self.clustering_summary()?;
        let clusters = match &data {
            Some(d) if self.run.clusters().is_file() => Some(self.read_clusters(d)?),
            _ => None,
        };
        let r = &self.cfg.report;
        let figures = FigureData {
            samples: data.as_ref().map(|d| SampleTable {
                ids: d.sample_ids.clone(),
                label: d.label.clone(),
                domain: d.domain.clone(),
                domain_names: d.domain_names.clone(),
            }),
            training,
            metric_curves: self.curve_series()?,
            embeddings: self.embedding_series()?,
            clusters,
            violin: ViolinParams {
                alpha: r.violin_alpha,
                base: r.violin_base,
                eps: r.violin_eps,
            },
            violins: self.violins()?,
        };
        let report = RunReport {
            format: REPORT_FORMAT.to_string(),
            version: 1,
            config: serde_json::to_value(&self.cfg).map_err(advrep_core::Error::from)?,
            stages,
            missing_stages,
            summary: Summary {
                accuracy,
                manifolds,
                clustering,
            },
        };
        Ok((report, figures))
    }
}

fn accuracy_summary(points: &[TrainingPoint]) -> Option<AccuracySummary> {
    let last = points.iter().map(|p| p.epoch).max()?;
    let at = |split: &str| points.iter().find(|p| p.epoch == last && p.split == split);
    let train = at("train")?;
    let val = at("val")?;
    let early_peak = points
        .iter()
        .filter(|p| p.split == "val" && p.epoch <= 10)
        .map(|p| p.domain_acc)
        .reduce(f64::max)?;
    Some(AccuracySummary {
        final_epoch: last,
        train_label_acc: train.label_acc,
        val_label_acc: val.label_acc,
        train_domain_acc: train.domain_acc,
        val_domain_acc: val.domain_acc,
        early_peak_val_domain_acc: early_peak,
    })
}

/// Writes the schema, the figure data and the report, in that order.
pub fn write_report(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let (report, figures) = ctx.build_report()?;
    let run = &ctx.run;
    write_text(&run.schema(), REPORT_SCHEMA)?;
    write_json(&run.figure_data(), &figures)?;
    write_json(&run.report(), &report)?;
    if !report.missing_stages.is_empty() {
        log::warn!("report written with missing stages: {}", report.missing_stages.join(", "));
    }
    Ok(vec![run.schema(), run.figure_data(), run.report()])
}
