use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use advrep_core::attribution::{SurrogateConfig, VanillaMethod, VIOLIN_ALPHA, VIOLIN_BASE, VIOLIN_EPS};
use advrep_core::data::SynthConfig;
use advrep_core::manifold::{UmapConfig, LOWESS_FRAC};
use advrep_core::net::LayerId;
use advrep_core::stratify::StratifyConfig;
use advrep_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    /// Relative paths resolve against the config file's directory.
    Csv { expression: PathBuf, labels: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSettings {
    /// Layers explained by the activation surrogate at every snapshot.
    pub layers: Vec<LayerId>,
    pub surrogate: SurrogateConfig,
    pub n_coalitions: usize,
    pub background_size: usize,
    /// Explanations of the label output on the raw inputs, final model only.
    pub vanilla: Vec<VanillaMethod>,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        AttributionSettings {
            layers: LayerId::ALL.to_vec(),
            surrogate: SurrogateConfig::default(),
            n_coalitions: 256,
            background_size: 50,
            vanilla: vec![
                VanillaMethod::KernelShap { n_coalitions: 512 },
                VanillaMethod::IntegratedGradients { steps: 64 },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldSettings {
    /// `n_neighbors` is capped at n/4 when applied.
    pub umap: UmapConfig,
    /// Principal components kept before embedding the raw inputs.
    pub input_pcs: usize,
    pub lowess_frac: f64,
    /// Neighbourhood size of the clustering graph, capped at n/4.
    pub knn_neighbors: usize,
    pub resolution: f64,
    /// Layer whose final SHAP embedding is clustered.
    pub cluster_layer: LayerId,
}

impl Default for ManifoldSettings {
    fn default() -> Self {
        ManifoldSettings {
            umap: UmapConfig::default(),
            input_pcs: 50,
            lowess_frac: LOWESS_FRAC,
            knn_neighbors: 400,
            resolution: 0.3,
            cluster_layer: LayerId::FeatureExtractorDropout1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    pub violin_alpha: f64,
    pub violin_base: f64,
    pub violin_eps: f64,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings {
            violin_alpha: VIOLIN_ALPHA,
            violin_base: VIOLIN_BASE,
            violin_eps: VIOLIN_EPS,
        }
    }
}

/// Everything a run needs. One seed drives every random stream; it is
/// copied into each sub-config when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    /// Also run k-fold cross-validation during `train`.
    pub cross_validate: bool,
    pub snapshot_epochs: Vec<usize>,
    pub attribution: AttributionSettings,
    pub manifold: ManifoldSettings,
    pub stratify: StratifyConfig,
    pub report: ReportSettings,
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataSource::default(),
            train: TrainConfig::default(),
            cross_validate: false,
            snapshot_epochs: vec![1, 5, 10, 20, 30, 50, 75, 100, 125, 150],
            attribution: AttributionSettings::default(),
            manifold: ManifoldSettings::default(),
            stratify: StratifyConfig::default(),
            report: ReportSettings::default(),
            seed: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("cannot parse config: {e}")))
    }

    /// Reads a config file, applies a seed override, checks it, and makes
    /// CSV paths absolute.
    pub fn load(path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Csv { expression, labels } = &mut cfg.data {
            for p in [expression, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.resolve(seed)
    }

    /// Applies the seed override and propagates the seed, then validates.
    pub fn resolve(mut self, seed: Option<u64>) -> CliResult<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        let seed = self
            .seed
            .ok_or_else(|| CliError::Config("no seed: set `seed` in the config or pass --seed".into()))?;
        if let DataSource::Synth(s) = &mut self.data {
            s.seed = seed;
        }
        self.train.seed = seed;
        self.attribution.surrogate.seed = seed;
        self.manifold.umap.seed = seed;
        self.stratify.seed = seed;
        self.stratify.surrogate.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn final_epoch(&self) -> usize {
        self.snapshot_epochs.last().copied().unwrap_or(self.train.epochs)
    }

    pub fn validate(&self) -> CliResult<()> {
        match &self.data {
            DataSource::Synth(s) => s.validate()?,
            DataSource::Csv { expression, labels } => {
                for p in [expression, labels] {
                    if !p.is_file() {
                        return Err(CliError::Config(format!("data file {} does not exist", p.display())));
                    }
                }
            }
        }
        self.train.validate()?;
        let e = &self.snapshot_epochs;
        if e.is_empty() {
            return Err(CliError::Config("snapshot_epochs is empty".into()));
        }
        if !e.windows(2).all(|w| w[0] < w[1]) {
            return Err(CliError::Config("snapshot_epochs must be strictly increasing".into()));
        }
        if e[0] < 1 || e[e.len() - 1] > self.train.epochs {
            return Err(CliError::Config(format!(
                "snapshot epochs must lie in 1..={}",
                self.train.epochs
            )));
        }
        let a = &self.attribution;
        if a.layers.is_empty() {
            return Err(CliError::Config("attribution.layers is empty".into()));
        }
        if !a.layers.contains(&self.manifold.cluster_layer) {
            return Err(CliError::Config(format!(
                "manifold.cluster_layer {} is not among attribution.layers",
                self.manifold.cluster_layer
            )));
        }
        if a.background_size == 0 || self.stratify.background_size == 0 {
            return Err(CliError::Config("background_size must be positive".into()));
        }
        if !(self.stratify.test_fraction > 0.0 && self.stratify.test_fraction < 1.0) {
            return Err(CliError::Config("stratify.test_fraction must lie in (0, 1)".into()));
        }
        let m = &self.manifold;
        if !(m.resolution > 0.0) || !(m.lowess_frac > 0.0 && m.lowess_frac <= 1.0) {
            return Err(CliError::Config("need resolution > 0 and lowess_frac in (0, 1]".into()));
        }
        if m.knn_neighbors == 0 || m.umap.n_neighbors < 2 || m.input_pcs == 0 {
            return Err(CliError::Config(
                "knn_neighbors and input_pcs must be positive, umap.n_neighbors at least 2".into(),
            ));
        }
        let r = &self.report;
        if !(r.violin_base > 1.0) || !(r.violin_eps > 0.0) {
            return Err(CliError::Config("need violin_base > 1 and violin_eps > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required_and_propagated() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert!(matches!(cfg.clone().resolve(None), Err(CliError::Config(_))));
        let r = cfg.resolve(Some(7)).unwrap();
        assert_eq!(r.train.seed, 7);
        assert_eq!(r.manifold.umap.seed, 7);
        assert_eq!(r.stratify.surrogate.seed, 7);
        match r.data {
            DataSource::Synth(s) => assert_eq!(s.seed, 7),
            DataSource::Csv { .. } => unreachable!(),
        }
    }

    #[test]
    fn unknown_fields_and_bad_epochs_are_config_errors() {
        assert!(PipelineConfig::from_json(r#"{"sed": 1}"#).is_err());
        let cfg = PipelineConfig::from_json(r#"{"seed": 1, "snapshot_epochs": [5, 3]}"#).unwrap();
        assert!(cfg.resolve(None).is_err());
        let cfg = PipelineConfig::from_json(r#"{"seed": 1, "snapshot_epochs": [500]}"#).unwrap();
        assert!(cfg.resolve(None).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = PipelineConfig::default().resolve(Some(3)).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
    }
}
