//! Run-directory layout and artifact IO. Every path a stage writes is
//! named here so downstream stages and the report agree on it.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use advrep_core::data::LabeledMatrix;
use advrep_core::net::LayerId;
use advrep_core::Matrix;

use crate::error::{CliError, CliResult};
use crate::Stage;

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn expression(&self) -> PathBuf {
        self.root.join("data/expression.csv")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("data/labels.csv")
    }

    pub fn planted(&self) -> PathBuf {
        self.root.join("data/planted.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("train/checkpoint.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("train/metrics.csv")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("train/split.json")
    }

    pub fn cv(&self) -> PathBuf {
        self.root.join("train/cv.json")
    }

    pub fn cv_metrics(&self) -> PathBuf {
        self.root.join("train/cv_metrics.csv")
    }

    pub fn activations(&self, layer: LayerId, epoch: usize) -> PathBuf {
        self.root.join(format!("train/activations/{layer}_epoch_{epoch:04}.csv"))
    }

    pub fn shap(&self, layer: LayerId, epoch: usize) -> PathBuf {
        self.root.join(format!("attribute/shap_{layer}_epoch_{epoch:04}.csv"))
    }

    pub fn vanilla(&self, method: &str) -> PathBuf {
        self.root.join(format!("attribute/vanilla_{method}.csv"))
    }

    pub fn attribution_summary(&self) -> PathBuf {
        self.root.join("attribute/summary.json")
    }

    pub fn embedding(&self, name: &str) -> PathBuf {
        self.root.join(format!("embed/{name}.csv"))
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("score/scores.csv")
    }

    pub fn manifold_scores(&self) -> PathBuf {
        self.root.join("score/manifolds.csv")
    }

    pub fn clusters(&self) -> PathBuf {
        self.root.join("leiden/clusters.csv")
    }

    pub fn leiden_summary(&self) -> PathBuf {
        self.root.join("leiden/summary.json")
    }

    pub fn stratify_report(&self) -> PathBuf {
        self.root.join("stratify/report.json")
    }

    pub fn drivers(&self) -> PathBuf {
        self.root.join("stratify/drivers.csv")
    }

    pub fn cluster_attributions(&self, cluster: usize) -> PathBuf {
        self.root.join(format!("stratify/attributions/cluster_{cluster}.csv"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report/report.json")
    }

    pub fn figure_data(&self) -> PathBuf {
        self.root.join("report/figure_data.json")
    }

    pub fn schema(&self) -> PathBuf {
        self.root.join("report/report.schema.json")
    }

    /// Path relative to the run root, with forward slashes.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// Embedding artifact names.
pub fn raw_embedding_name(layer: LayerId, epoch: usize) -> String {
    format!("raw_{layer}_epoch_{epoch:04}")
}

pub fn shap_embedding_name(layer: LayerId, epoch: usize) -> String {
    format!("shap_{layer}_epoch_{epoch:04}")
}

pub fn vanilla_embedding_name(method: &str) -> String {
    format!("vanilla_{method}")
}

pub const INPUT_EMBEDDING: &str = "input";

pub fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

/// Fails with a pointer to the producing command when `path` is absent.
pub fn require(path: &Path, producer: Stage) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.name(),
        })
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(advrep_core::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, producer: Stage) -> CliResult<T> {
    require(path, producer)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(advrep_core::Error::from)?)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_matrix(path: &Path, row_ids: &[String], col_names: Vec<String>, values: &Matrix) -> CliResult<()> {
    create_parent(path)?;
    LabeledMatrix::new("sample_id", row_ids.to_vec(), col_names, values.clone())?.write_csv(path)?;
    Ok(())
}

pub fn read_matrix(path: &Path, producer: Stage) -> CliResult<LabeledMatrix> {
    require(path, producer)?;
    Ok(LabeledMatrix::read_csv(path)?)
}

pub fn hidden_names(width: usize) -> Vec<String> {
    (0..width).map(|j| format!("h{j}")).collect()
}

/// Writes `header` then `rows` as CSV.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| advrep_core::Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let csv_err = |e: csv::Error| advrep_core::Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// All records of a CSV as string rows, header excluded.
pub fn read_rows(path: &Path, producer: Stage) -> CliResult<Vec<Vec<String>>> {
    require(path, producer)?;
    let csv_err = |e: csv::Error| advrep_core::Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(csv_err)?.iter().map(str::to_string).collect());
    }
    Ok(rows)
}
