use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use advrep_core::attribution::{
    surrogate_attributions, train_surrogate, vanilla_explain, BackgroundSet, VanillaMethod,
};
use advrep_core::data::{load_expression_csv, synth_generate, write_expression_csv, write_labels_csv, Dataset, PlantedSignal};
use advrep_core::manifold::{
    build_curves, embed_2d, knn_graph, leiden, pca, scaled_neighbors, score_embedding, LabelKind, Metric,
};
use advrep_core::net::{load_checkpoint, save_checkpoint, LayerId};
use advrep_core::stratify::{cluster_coherence, shuffled_control, StratifyReport};
use advrep_core::trainer::{run_cv, run_training_with_snapshots, write_metrics_csv};
use advrep_core::Matrix;

use crate::artifacts::*;
use crate::config::{DataSource, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::Stage;

/// A resolved config bound to its run directory.
pub struct Context {
    pub cfg: PipelineConfig,
    pub run: RunDir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub layer: LayerId,
    pub epoch: usize,
    pub train_accuracy: f64,
    pub base_value: f64,
    pub expected_value: f64,
    pub top_features: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaSummary {
    pub method: String,
    pub base_value: f64,
    pub expected_value: f64,
    pub top_features: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub background_indices: Vec<usize>,
    pub surrogates: Vec<SurrogateSummary>,
    pub vanilla: Vec<VanillaSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeidenSummary {
    pub layer: LayerId,
    pub epoch: usize,
    pub embedding: String,
    pub k: usize,
    pub resolution: f64,
    pub n_clusters: usize,
    pub sizes: Vec<usize>,
    pub quality: f64,
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifyArtifact {
    #[serde(flatten)]
    pub report: StratifyReport,
    pub control_macro_f1: f64,
    /// Per cluster, how many of its top drivers are planted label-informative
    /// features.
    pub planted_driver_hits: Option<Vec<usize>>,
}

pub fn vanilla_name(m: &VanillaMethod) -> &'static str {
    match m {
        VanillaMethod::KernelShap { .. } => "kernel_shap",
        VanillaMethod::IntegratedGradients { .. } => "integrated_gradients",
    }
}

fn label_vec(data: &Dataset) -> Vec<usize> {
    data.labels_usize()
}

impl Context {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Self {
        Context {
            cfg,
            run: RunDir::new(out),
        }
    }

    fn seed(&self) -> u64 {
        self.cfg.seed()
    }

    pub fn load_dataset(&self) -> CliResult<Dataset> {
        require(&self.run.expression(), Stage::Synth)?;
        require(&self.run.labels(), Stage::Synth)?;
        let mut data = load_expression_csv(&self.run.expression(), &self.run.labels())?;
        if self.run.planted().is_file() {
            data.planted = Some(read_json::<PlantedSignal>(&self.run.planted(), Stage::Synth)?);
        }
        Ok(data)
    }

    pub(crate) fn read_split(&self) -> CliResult<SplitRecord> {
        read_json(&self.run.split(), Stage::Train)
    }

    fn umap_for(&self, n: usize) -> advrep_core::manifold::UmapConfig {
        let mut u = self.cfg.manifold.umap.clone();
        u.n_neighbors = scaled_neighbors(u.n_neighbors, n);
        u
    }

    fn write_config(&self) -> CliResult<()> {
        write_json(&self.run.config(), &self.cfg)
    }

    pub fn synth(&self) -> CliResult<Vec<PathBuf>> {
        self.write_config()?;
        let data = match &self.cfg.data {
            DataSource::Synth(s) => synth_generate(s)?,
            DataSource::Csv { expression, labels } => load_expression_csv(expression, labels)?,
        };
        data.validate()?;
        std::fs::create_dir_all(self.run.root().join("data")).map_err(|e| CliError::io(self.run.root(), e))?;
        write_expression_csv(&data, &self.run.expression())?;
        write_labels_csv(&data, &self.run.labels())?;
        let mut out = vec![self.run.expression(), self.run.labels()];
        match &data.planted {
            Some(p) => {
                write_json(&self.run.planted(), p)?;
                out.push(self.run.planted());
            }
            None => remove_if_present(&self.run.planted())?,
        }
        Ok(out)
    }

    pub fn train(&self) -> CliResult<Vec<PathBuf>> {
        let data = self.load_dataset()?;
        self.write_config()?;
        let cfg = &self.cfg;
        let rec = run_training_with_snapshots(&data, &cfg.train, &cfg.snapshot_epochs)?;
        let run = &self.run;
        create_parent(&run.checkpoint())?;
        save_checkpoint(&rec.params, &run.checkpoint())?;
        write_metrics_csv(&run.metrics(), &[("holdout".to_string(), &rec.history)])?;
        write_json(
            &run.split(),
            &SplitRecord {
                train: rec.train_indices.clone(),
                val: rec.val_indices.clone(),
            },
        )?;
        let mut out = vec![run.checkpoint(), run.metrics(), run.split()];
        for snap in &rec.snapshots {
            for act in &snap.activations {
                let path = run.activations(act.layer_id, snap.epoch);
                write_matrix(&path, &data.sample_ids, hidden_names(act.values.cols()), &act.values)?;
                out.push(path);
            }
        }
        if cfg.cross_validate {
            let cv = run_cv(&data, &cfg.train)?;
            write_json(&run.cv(), &cv)?;
            let names: Vec<String> = (0..cv.folds.len()).map(|f| f.to_string()).collect();
            let runs: Vec<(String, &[_])> = names.into_iter().zip(cv.folds.iter().map(Vec::as_slice)).collect();
            write_metrics_csv(&run.cv_metrics(), &runs)?;
            out.extend([run.cv(), run.cv_metrics()]);
        }
        Ok(out)
    }

    pub fn attribute(&self) -> CliResult<Vec<PathBuf>> {
        let run = &self.run;
        require(&run.checkpoint(), Stage::Train)?;
        let data = self.load_dataset()?;
        let params = load_checkpoint(&run.checkpoint())?;
        let split = self.read_split()?;
        self.write_config()?;
        let a = &self.cfg.attribution;
        let seed = self.seed();
        let background = BackgroundSet::stratified(&data.x, &data.label, &split.train, a.background_size, seed)?;
        let labels = label_vec(&data);
        let train_labels: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();

        let jobs: Vec<(LayerId, usize)> = a
            .layers
            .iter()
            .flat_map(|&l| self.cfg.snapshot_epochs.iter().map(move |&e| (l, e)))
            .collect();
        let acts: Vec<Matrix> = jobs
            .iter()
            .map(|&(l, e)| Ok(read_matrix(&run.activations(l, e), Stage::Train)?.values))
            .collect::<CliResult<_>>()?;
        let results: Vec<(Matrix, SurrogateSummary)> = jobs
            .par_iter()
            .zip(&acts)
            .map(|(&(layer, epoch), act)| -> CliResult<_> {
                let sur = train_surrogate(&act.select_rows(&split.train), &train_labels, &a.surrogate)?;
                let predicted = sur.predict_class(&act.select_rows(&split.train));
                let correct = predicted.iter().zip(&train_labels).filter(|(p, t)| p == t).count();
                let output = sur.output_for_class(1).unwrap_or(0);
                let att = surrogate_attributions(&sur, output, act, &background.reindexed(act)?, a.n_coalitions, seed)?;
                let top = att.top_features(10).into_iter().map(|j| format!("h{j}")).collect();
                let summary = SurrogateSummary {
                    layer,
                    epoch,
                    train_accuracy: correct as f64 / train_labels.len() as f64,
                    base_value: att.base_value,
                    expected_value: att.expected_value,
                    top_features: top,
                };
                Ok((att.values, summary))
            })
            .collect::<CliResult<_>>()?;

        let mut out = Vec::new();
        let mut surrogates = Vec::new();
        for ((layer, epoch), (values, summary)) in jobs.into_iter().zip(results) {
            let path = run.shap(layer, epoch);
            write_matrix(&path, &data.sample_ids, hidden_names(values.cols()), &values)?;
            out.push(path);
            surrogates.push(summary);
        }
        let mut vanilla = Vec::new();
        for m in &a.vanilla {
            let att = vanilla_explain(&params, &data.x, &data.feature_names, &background, *m, seed)?;
            let path = run.vanilla(vanilla_name(m));
            write_matrix(&path, &data.sample_ids, data.feature_names.clone(), &att.values)?;
            out.push(path);
            vanilla.push(VanillaSummary {
                method: vanilla_name(m).to_string(),
                base_value: att.base_value,
                expected_value: att.expected_value,
                top_features: att.top_features(10).into_iter().map(|j| data.feature_names[j].clone()).collect(),
            });
        }
        write_json(
            &run.attribution_summary(),
            &AttributionSummary {
                background_indices: background.indices.clone(),
                surrogates,
                vanilla,
            },
        )?;
        out.push(run.attribution_summary());
        Ok(out)
    }

    /// Every embedding the later stages read, with its source matrix path
    /// and producing stage.
    pub(crate) fn embedding_jobs(&self) -> Vec<(String, PathBuf, Stage)> {
        let run = &self.run;
        let mut jobs = Vec::new();
        for &l in &self.cfg.attribution.layers {
            for &e in &self.cfg.snapshot_epochs {
                jobs.push((raw_embedding_name(l, e), run.activations(l, e), Stage::Train));
                jobs.push((shap_embedding_name(l, e), run.shap(l, e), Stage::Attribute));
            }
        }
        for m in &self.cfg.attribution.vanilla {
            let name = vanilla_name(m);
            jobs.push((vanilla_embedding_name(name), run.vanilla(name), Stage::Attribute));
        }
        jobs
    }

    pub fn embed(&self) -> CliResult<Vec<PathBuf>> {
        let data = self.load_dataset()?;
        let jobs = self.embedding_jobs();
        let sources: Vec<Matrix> = jobs
            .iter()
            .map(|(_, path, producer)| Ok(read_matrix(path, *producer)?.values))
            .collect::<CliResult<_>>()?;
        self.write_config()?;
        let umap = self.umap_for(data.n_samples());
        let k = self.cfg.manifold.input_pcs.min(data.n_samples()).min(data.n_features());
        let input = pca(&data.x, k)?.scores;

        let mut names: Vec<String> = vec![INPUT_EMBEDDING.to_string()];
        names.extend(jobs.into_iter().map(|j| j.0));
        let mats: Vec<&Matrix> = std::iter::once(&input).chain(&sources).collect();
        let coords: Vec<Matrix> = mats
            .par_iter()
            .map(|m| Ok(embed_2d(m, &umap)?.coords))
            .collect::<CliResult<_>>()?;
        let mut out = Vec::new();
        for (name, c) in names.iter().zip(&coords) {
            let path = self.run.embedding(name);
            write_matrix(&path, &data.sample_ids, vec!["x".into(), "y".into()], c)?;
            out.push(path);
        }
        Ok(out)
    }

    pub fn score(&self) -> CliResult<Vec<PathBuf>> {
        let data = self.load_dataset()?;
        let labels = label_vec(&data);
        let read = |name: &str| -> CliResult<Matrix> { Ok(read_matrix(&self.run.embedding(name), Stage::Embed)?.values) };
        let epochs = &self.cfg.snapshot_epochs;
        let mut rows = Vec::new();
        let mut manifold_rows = Vec::new();
        let mut push_manifold = |name: &str, scores: &[(LabelKind, Metric, f64); 4]| {
            for (kind, metric, v) in scores {
                manifold_rows.push(vec![name.to_string(), kind.name().into(), metric.name().into(), v.to_string()]);
            }
        };
        let input = score_embedding(&read(INPUT_EMBEDDING)?, &labels, &data.domain)?;
        push_manifold(INPUT_EMBEDDING, &input);
        for &layer in &self.cfg.attribution.layers {
            for (source, name_of) in [
                ("raw", raw_embedding_name as fn(LayerId, usize) -> String),
                ("shap", shap_embedding_name),
            ] {
                let per_epoch: Vec<[(LabelKind, Metric, f64); 4]> = epochs
                    .iter()
                    .map(|&e| Ok(score_embedding(&read(&name_of(layer, e))?, &labels, &data.domain)?))
                    .collect::<CliResult<_>>()?;
                push_manifold(&name_of(layer, self.cfg.final_epoch()), per_epoch.last().expect("epochs validated"));
                for c in build_curves(epochs, &per_epoch, self.cfg.manifold.lowess_frac)? {
                    for i in 0..c.epochs.len() {
                        rows.push(vec![
                            c.epochs[i].to_string(),
                            layer.name().to_string(),
                            source.to_string(),
                            c.label_kind.name().to_string(),
                            c.metric.name().to_string(),
                            c.raw[i].to_string(),
                            c.normalized[i].to_string(),
                            c.smoothed[i].to_string(),
                        ]);
                    }
                }
            }
        }
        for m in &self.cfg.attribution.vanilla {
            let name = vanilla_embedding_name(vanilla_name(m));
            push_manifold(&name, &score_embedding(&read(&name)?, &labels, &data.domain)?);
        }
        self.write_config()?;
        let run = &self.run;
        write_rows(
            &run.scores(),
            &["epoch", "layer", "source", "label_kind", "metric", "raw", "normalized", "smoothed"],
            &rows,
        )?;
        write_rows(&run.manifold_scores(), &["manifold", "label_kind", "metric", "value"], &manifold_rows)?;
        Ok(vec![run.scores(), run.manifold_scores()])
    }

    pub fn leiden(&self) -> CliResult<Vec<PathBuf>> {
        let layer = self.cfg.manifold.cluster_layer;
        let epoch = self.cfg.final_epoch();
        let name = shap_embedding_name(layer, epoch);
        let emb = read_matrix(&self.run.embedding(&name), Stage::Embed)?;
        self.write_config()?;
        let n = emb.values.rows();
        let k = scaled_neighbors(self.cfg.manifold.knn_neighbors, n).min(n.saturating_sub(1));
        let graph = knn_graph(&emb.values, k)?;
        let cl = leiden(&graph.graph, self.cfg.manifold.resolution, self.seed())?;
        let mut sizes = vec![0; cl.n_clusters];
        for &c in &cl.membership {
            sizes[c] += 1;
        }
        let rows: Vec<Vec<String>> = emb
            .row_ids
            .iter()
            .zip(&cl.membership)
            .map(|(id, c)| vec![id.clone(), c.to_string()])
            .collect();
        write_rows(&self.run.clusters(), &["sample_id", "cluster"], &rows)?;
        write_json(
            &self.run.leiden_summary(),
            &LeidenSummary {
                layer,
                epoch,
                embedding: name,
                k,
                resolution: cl.resolution,
                n_clusters: cl.n_clusters,
                sizes,
                quality: cl.quality,
                trace: cl.trace,
            },
        )?;
        Ok(vec![self.run.clusters(), self.run.leiden_summary()])
    }

    pub fn read_clusters(&self, data: &Dataset) -> CliResult<Vec<usize>> {
        let rows = read_rows(&self.run.clusters(), Stage::Leiden)?;
        let by_id: BTreeMap<&str, usize> = data.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut membership = vec![usize::MAX; data.n_samples()];
        for (r, row) in rows.iter().enumerate() {
            let bad = |msg: String| advrep_core::Error::Parse { row: r + 2, col: 1, msg };
            let i = *by_id
                .get(row[0].as_str())
                .ok_or_else(|| bad(format!("unknown sample `{}` in clusters", row[0])))?;
            membership[i] = row[1].parse().map_err(|_| bad(format!("bad cluster id `{}`", row[1])))?;
        }
        if membership.contains(&usize::MAX) {
            return Err(advrep_core::Error::Label("clusters file does not cover every sample".into()).into());
        }
        Ok(membership)
    }

    pub fn stratify(&self) -> CliResult<Vec<PathBuf>> {
        let data = self.load_dataset()?;
        let membership = self.read_clusters(&data)?;
        self.write_config()?;
        let cfg = &self.cfg.stratify;
        let report = cluster_coherence(&data.x, &data.feature_names, &membership, &data.label, cfg)?;
        let control = shuffled_control(&data.x, &membership, &data.label, cfg)?;
        let hits = data.planted.as_ref().map(|p| {
            let informative = p.label_informative();
            report
                .drivers
                .iter()
                .map(|d| d.drivers.iter().filter(|f| informative.contains(&f.feature)).count())
                .collect()
        });
        let run = &self.run;
        let mut out = Vec::new();
        let mut driver_rows = Vec::new();
        for d in &report.drivers {
            for (rank, f) in d.drivers.iter().enumerate() {
                driver_rows.push(vec![
                    d.cluster.to_string(),
                    (rank + 1).to_string(),
                    f.name.clone(),
                    f.mean_abs.to_string(),
                ]);
            }
        }
        write_rows(&run.drivers(), &["cluster", "rank", "feature", "mean_abs"], &driver_rows)?;
        let dir = run.root().join("stratify/attributions");
        if dir.is_dir() {
            std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        for att in &report.attributions {
            let ids: Vec<String> = att.samples.iter().map(|&i| data.sample_ids[i].clone()).collect();
            let path = run.cluster_attributions(att.cluster);
            write_matrix(&path, &ids, data.feature_names.clone(), &att.values)?;
            out.push(path);
        }
        write_json(
            &run.stratify_report(),
            &StratifyArtifact {
                report,
                control_macro_f1: control,
                planted_driver_hits: hits,
            },
        )?;
        out.extend([run.stratify_report(), run.drivers()]);
        Ok(out)
    }
}

fn remove_if_present(path: &std::path::Path) -> CliResult<()> {
    if path.is_file() {
        std::fs::remove_file(path).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}
