//! Datasets: synthetic domain-confounded generation and expression-matrix IO.
//!
//! The synthetic generator plants two kinds of mean shift on top of Gaussian
//! noise: a large shift on a feature subset specific to each domain, and a
//! smaller shift, shared by every domain, on the label-informative subset for
//! samples with label 1. Each domain also offsets the baseline of the
//! label-informative features by a uniform draw, so those features carry
//! domain information too and only their within-domain contrast tracks the
//! label. The planted subsets are kept alongside the data so
//! attributions can be scored against them.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Samples × features values with per-sample domain and binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub domain: Vec<usize>,
    pub label: Vec<u8>,
    pub n_domains: usize,
    pub domain_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub sample_ids: Vec<String>,
    pub planted: Option<PlantedSignal>,
}

/// Feature subsets carrying the synthetic domain and label signals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSignal {
    pub domain_features: Vec<Vec<usize>>,
    pub label_features: Vec<usize>,
    /// Features shifted in the protected share of label-0 samples.
    pub protective_features: Vec<usize>,
}

impl PlantedSignal {
    /// Label and protective features, sorted.
    pub fn label_informative(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.label_features.iter().chain(&self.protective_features).copied().collect();
        all.sort_unstable();
        all
    }
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.label.iter().map(|&l| l as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if self.domain.len() != n || self.label.len() != n || self.sample_ids.len() != n {
            return Err(Error::Contract(format!(
                "dataset has {n} rows but {} domains, {} labels, {} sample ids",
                self.domain.len(),
                self.label.len(),
                self.sample_ids.len()
            )));
        }
        if self.feature_names.len() != self.x.cols() {
            return Err(Error::Contract(format!(
                "{} feature names for {} columns",
                self.feature_names.len(),
                self.x.cols()
            )));
        }
        if !self.x.all_finite() {
            return Err(Error::NonFinite("dataset values".into()));
        }
        if let Some(d) = self.domain.iter().find(|&&d| d >= self.n_domains) {
            return Err(Error::Label(format!("domain id {d} out of range for {} domains", self.n_domains)));
        }
        if let Some(l) = self.label.iter().find(|&&l| l > 1) {
            return Err(Error::Label(format!("label {l} is not binary")));
        }
        for k in 0..self.n_domains {
            let c = self.domain.iter().filter(|&&d| d == k).count();
            if c < 2 {
                return Err(Error::Stratification(format!("domain {k} has {c} samples, need at least 2")));
            }
        }
        for l in 0..2u8 {
            let c = self.label.iter().filter(|&&v| v == l).count();
            if c < 2 {
                return Err(Error::Stratification(format!("label {l} has {c} samples, need at least 2")));
            }
        }
        Ok(())
    }

    /// Row subset, keeping metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            domain: indices.iter().map(|&i| self.domain[i]).collect(),
            label: indices.iter().map(|&i| self.label[i]).collect(),
            n_domains: self.n_domains,
            domain_names: self.domain_names.clone(),
            feature_names: self.feature_names.clone(),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            planted: self.planted.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_per_domain: usize,
    pub n_domains: usize,
    pub n_features: usize,
    /// Size of each domain's private shifted subset.
    pub domain_features_per_domain: usize,
    pub n_label_features: usize,
    /// Features shifted by `label_effect` in a `protected_fraction` share
    /// of label-0 samples, giving the negatives a label-relevant subgroup.
    pub n_protective_features: usize,
    pub protected_fraction: f64,
    pub domain_effect: f64,
    pub label_effect: f64,
    /// Half-width of the per-domain uniform baseline offset on the
    /// label-informative features. 0 disables it.
    pub label_feature_domain_shift: f64,
    /// Fraction of label-1 samples in every domain, unless overridden below.
    pub label_rate: f64,
    pub label_rate_per_domain: Option<Vec<f64>>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_per_domain: 200,
            n_domains: 6,
            n_features: 200,
            domain_features_per_domain: 15,
            n_label_features: 10,
            n_protective_features: 10,
            protected_fraction: 0.5,
            domain_effect: 3.0,
            label_effect: 1.0,
            label_feature_domain_shift: 3.0,
            label_rate: 0.3,
            label_rate_per_domain: None,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains < 2 {
            return Err(Error::Config(format!("need at least 2 domains, got {}", self.n_domains)));
        }
        if !(self.domain_effect > self.label_effect && self.label_effect >= 0.0) {
            return Err(Error::Config(format!(
                "need domain_effect > label_effect >= 0, got {} and {}",
                self.domain_effect, self.label_effect
            )));
        }
        let planted = self.n_domains * self.domain_features_per_domain
            + self.n_label_features
            + self.n_protective_features;
        if planted > self.n_features {
            return Err(Error::Config(format!(
                "{planted} planted features do not fit in {} features",
                self.n_features
            )));
        }
        if let Some(r) = &self.label_rate_per_domain {
            if r.len() != self.n_domains {
                return Err(Error::Config("label_rate_per_domain needs one rate per domain".into()));
            }
        }
        for &r in self.rates().iter() {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("label rate {r} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.protected_fraction) {
            return Err(Error::Config(format!(
                "protected_fraction {} outside [0, 1]",
                self.protected_fraction
            )));
        }
        if !(self.label_feature_domain_shift >= 0.0 && self.label_feature_domain_shift.is_finite()) {
            return Err(Error::Config(format!(
                "label_feature_domain_shift must be finite and >= 0, got {}",
                self.label_feature_domain_shift
            )));
        }
        if !(self.noise_sd > 0.0) {
            return Err(Error::Config("noise_sd must be positive".into()));
        }
        if self.n_per_domain < 2 {
            return Err(Error::Config("need at least 2 samples per domain".into()));
        }
        Ok(())
    }

    fn rates(&self) -> Vec<f64> {
        self.label_rate_per_domain
            .clone()
            .unwrap_or_else(|| vec![self.label_rate; self.n_domains])
    }
}

/// Draws a dataset; identical configs (including seed) give identical data.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // planted subsets are disjoint and drawn from a random feature permutation
    let mut perm: Vec<usize> = (0..cfg.n_features).collect();
    perm.shuffle(&mut rng);
    let mut cursor = perm.into_iter();
    let mut domain_features: Vec<Vec<usize>> = (0..cfg.n_domains)
        .map(|_| cursor.by_ref().take(cfg.domain_features_per_domain).collect())
        .collect();
    let mut label_features: Vec<usize> = cursor.by_ref().take(cfg.n_label_features).collect();
    let mut protective_features: Vec<usize> = cursor.take(cfg.n_protective_features).collect();
    domain_features.iter_mut().for_each(|f| f.sort_unstable());
    label_features.sort_unstable();
    protective_features.sort_unstable();
    let informative: Vec<usize> = label_features.iter().chain(&protective_features).copied().collect();

    let shift = cfg.label_feature_domain_shift;
    let offsets: Vec<Vec<f64>> = (0..cfg.n_domains)
        .map(|_| {
            informative
                .iter()
                .map(|_| if shift > 0.0 { rng.random_range(-shift..shift) } else { 0.0 })
                .collect()
        })
        .collect();

    let n = cfg.n_per_domain * cfg.n_domains;
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated");
    let mut x = Matrix::zeros(n, cfg.n_features);
    let mut domain = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    let mut is_protected = Vec::with_capacity(n);
    for (k, rate) in cfg.rates().into_iter().enumerate() {
        let positives = (rate * cfg.n_per_domain as f64).round() as usize;
        let protected = (cfg.protected_fraction * (cfg.n_per_domain - positives) as f64).round() as usize;
        // 1 positive, 2 protected negative, 0 other negative
        let mut groups: Vec<u8> = (0..cfg.n_per_domain)
            .map(|i| match i {
                i if i < positives => 1,
                i if i < positives + protected => 2,
                _ => 0,
            })
            .collect();
        groups.shuffle(&mut rng);
        for g in groups {
            domain.push(k);
            label.push(u8::from(g == 1));
            is_protected.push(g == 2);
        }
    }
    for i in 0..n {
        let row = x.row_mut(i);
        for v in row.iter_mut() {
            *v = noise.sample(&mut rng);
        }
        for &j in &domain_features[domain[i]] {
            row[j] += cfg.domain_effect;
        }
        for (&j, off) in informative.iter().zip(&offsets[domain[i]]) {
            row[j] += off;
        }
        if label[i] == 1 {
            for &j in &label_features {
                row[j] += cfg.label_effect;
            }
        }
        if is_protected[i] {
            for &j in &protective_features {
                row[j] += cfg.label_effect;
            }
        }
    }

    Ok(Dataset {
        x,
        domain,
        label,
        n_domains: cfg.n_domains,
        domain_names: (0..cfg.n_domains).map(|k| format!("domain_{k}")).collect(),
        feature_names: (0..cfg.n_features).map(|j| format!("f{j:04}")).collect(),
        sample_ids: (0..n).map(|i| format!("s{i:05}")).collect(),
        planted: Some(PlantedSignal {
            domain_features,
            label_features,
            protective_features,
        }),
    })
}

/// Reads a samples × features CSV (first column `sample_id`, header of
/// feature names) and a labels CSV with columns `sample_id, domain, label`.
/// Rows follow the labels file; domain names are encoded in sorted order.
pub fn load_expression_csv(expression: &Path, labels: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(expression)
        .map_err(|e| Error::csv(expression, e))?;
    let header = reader.headers().map_err(|e| Error::csv(expression, e))?.clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "expression header needs a sample id column and at least one feature".into(),
        });
    }
    let feature_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let d = feature_names.len();

    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for (r, rec) in reader.records().enumerate() {
        let row_no = r + 2;
        let rec = rec.map_err(|e| Error::csv(expression, e))?;
        if rec.len() != d + 1 {
            return Err(Error::Parse {
                row: row_no,
                col: rec.len(),
                msg: format!("ragged row: expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        let id = rec[0].to_string();
        let mut values = Vec::with_capacity(d);
        for (c, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: row_no,
                col: c + 1,
                msg: format!("non-numeric cell `{cell}`"),
            })?;
            values.push(v);
        }
        if rows.insert(id.clone(), values).is_some() {
            return Err(Error::Parse {
                row: row_no,
                col: 1,
                msg: format!("duplicate sample id `{id}` in expression file"),
            });
        }
    }

    let mut reader = csv::Reader::from_path(labels).map_err(|e| Error::csv(labels, e))?;
    let mut ids = Vec::new();
    let mut domain_raw = Vec::new();
    let mut label = Vec::new();
    let mut seen = HashSet::new();
    for (r, rec) in reader.records().enumerate() {
        let row_no = r + 2;
        let rec = rec.map_err(|e| Error::csv(labels, e))?;
        if rec.len() != 3 {
            return Err(Error::Parse {
                row: row_no,
                col: rec.len(),
                msg: "labels rows need sample_id, domain, label".into(),
            });
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Parse {
                row: row_no,
                col: 1,
                msg: format!("duplicate sample id `{id}` in labels file"),
            });
        }
        if !rows.contains_key(&id) {
            return Err(Error::Parse {
                row: row_no,
                col: 1,
                msg: format!("unknown sample id `{id}`: not in the expression file"),
            });
        }
        let l: u8 = match rec[2].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    row: row_no,
                    col: 3,
                    msg: format!("label `{other}` is not 0 or 1"),
                })
            }
        };
        ids.push(id);
        domain_raw.push(rec[1].to_string());
        label.push(l);
    }
    if let Some(missing) = rows.keys().filter(|k| !seen.contains(*k)).min() {
        return Err(Error::Label(format!("sample `{missing}` has no row in the labels file")));
    }

    let mut domain_names: Vec<String> = domain_raw.iter().cloned().collect::<HashSet<_>>().into_iter().collect();
    domain_names.sort();
    let code: HashMap<&str, usize> = domain_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let domain = domain_raw.iter().map(|s| code[s.as_str()]).collect();

    let mut data = Vec::with_capacity(ids.len() * d);
    for id in &ids {
        data.extend_from_slice(&rows[id]);
    }
    Ok(Dataset {
        x: Matrix::from_vec(ids.len(), d, data)?,
        domain,
        label,
        n_domains: domain_names.len(),
        domain_names,
        feature_names,
        sample_ids: ids,
        planted: None,
    })
}

pub fn write_expression_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(ds.feature_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (i, id) in ds.sample_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["sample_id", "domain", "label"]).map_err(|e| Error::csv(path, e))?;
    for i in 0..ds.n_samples() {
        let dom = &ds.domain_names[ds.domain[i]];
        w.write_record([ds.sample_ids[i].as_str(), dom.as_str(), &ds.label[i].to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A matrix with named rows and columns, stored as CSV with a leading id
/// column. Values are written in shortest round-trip form so a reload is
/// bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix {
    pub id_header: String,
    pub row_ids: Vec<String>,
    pub col_names: Vec<String>,
    pub values: Matrix,
}

impl LabeledMatrix {
    pub fn new(id_header: &str, row_ids: Vec<String>, col_names: Vec<String>, values: Matrix) -> Result<Self> {
        if row_ids.len() != values.rows() || col_names.len() != values.cols() {
            return Err(Error::Dimension {
                op: "labeled matrix",
                left: values.shape(),
                right: (row_ids.len(), col_names.len()),
            });
        }
        Ok(LabeledMatrix {
            id_header: id_header.to_string(),
            row_ids,
            col_names,
            values,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut header = vec![self.id_header.clone()];
        header.extend(self.col_names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        for (i, id) in self.row_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        let id_header = header.get(0).unwrap_or("id").to_string();
        let col_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut row_ids = Vec::new();
        let mut data = Vec::new();
        for (r, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            row_ids.push(rec[0].to_string());
            for (c, cell) in rec.iter().enumerate().skip(1) {
                data.push(cell.trim().parse().map_err(|_| Error::Parse {
                    row: r + 2,
                    col: c + 1,
                    msg: format!("non-numeric cell `{cell}` in {}", path.display()),
                })?);
            }
        }
        let values = Matrix::from_vec(row_ids.len(), col_names.len(), data)?;
        Self::new(&id_header, row_ids, col_names, values)
    }
}

/// Sums columns sharing a name; output columns follow first occurrence.
pub fn collapse_duplicate_genes(x: &Matrix, names: &[String]) -> Result<(Matrix, Vec<String>)> {
    if names.len() != x.cols() {
        return Err(Error::Dimension {
            op: "collapse_duplicate_genes",
            left: x.shape(),
            right: (names.len(), 1),
        });
    }
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut out_names = Vec::new();
    let target: Vec<usize> = names
        .iter()
        .map(|n| {
            *slot.entry(n.as_str()).or_insert_with(|| {
                out_names.push(n.clone());
                out_names.len() - 1
            })
        })
        .collect();
    let mut out = Matrix::zeros(x.rows(), out_names.len());
    for i in 0..x.rows() {
        let src = x.row(i);
        let dst = out.row_mut(i);
        for (j, &t) in target.iter().enumerate() {
            dst[t] += src[j];
        }
    }
    Ok((out, out_names))
}

/// Elementwise `ln(1 + x)`; negative entries are rejected.
pub fn log_transform(x: &Matrix) -> Result<Matrix> {
    if let Some(pos) = x.as_slice().iter().position(|&v| v < 0.0 || v.is_nan()) {
        let (r, c) = (pos / x.cols(), pos % x.cols());
        return Err(Error::Contract(format!(
            "log transform needs non-negative values, found {} at ({r}, {c})",
            x.as_slice()[pos]
        )));
    }
    Ok(x.map(f64::ln_1p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.n_samples(), 1200);
        let pos = a.label.iter().filter(|&&l| l == 1).count();
        assert_eq!(pos, 6 * 60);
        let planted = a.planted.as_ref().unwrap();
        let mut all: Vec<usize> = planted.domain_features.concat();
        all.extend(&planted.label_features);
        let unique: HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), all.len());
    }

    #[test]
    fn protective_features_lift_half_of_the_negatives() {
        let cfg = SynthConfig {
            noise_sd: 0.01,
            label_feature_domain_shift: 0.0,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        let p = ds.planted.as_ref().unwrap();
        assert_eq!(p.protective_features.len(), 10);
        assert!(p.protective_features.iter().all(|j| !p.label_features.contains(j)));
        assert_eq!(p.label_informative().len(), 20);
        let j = p.protective_features[0];
        let lifted: Vec<bool> = (0..ds.n_samples()).map(|i| ds.x[(i, j)] > 0.5).collect();
        let neg = ds.label.iter().filter(|&&l| l == 0).count();
        let lifted_neg = lifted.iter().zip(&ds.label).filter(|(&h, &l)| h && l == 0).count();
        assert_eq!(lifted_neg, neg / 2);
        assert!(lifted.iter().zip(&ds.label).all(|(&h, &l)| !(h && l == 1)));
    }

    #[test]
    fn synth_rejects_degenerate_configs() {
        let one = SynthConfig {
            n_domains: 1,
            domain_effect: 0.0,
            label_effect: 0.0,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&one), Err(Error::Config(_))));
        let inverted = SynthConfig {
            domain_effect: 0.5,
            label_effect: 1.0,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&inverted).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = write(dir.path(), "e.csv", "sample_id,A,B\nx1,1,2\nx2,3.5,-4\nx3,0,1e-3\n");
        let l = write(dir.path(), "l.csv", "sample_id,domain,label\nx3,lung,1\nx1,brca,0\nx2,lung,0\n");
        let ds = load_expression_csv(&e, &l).unwrap();
        assert_eq!(ds.sample_ids, vec!["x3", "x1", "x2"]);
        assert_eq!(ds.x.row(0), &[0.0, 1e-3]);
        assert_eq!(ds.x.row(2), &[3.5, -4.0]);
        assert_eq!(ds.domain, vec![1, 0, 1]);
        assert_eq!(ds.domain_names, vec!["brca", "lung"]);

        let e2 = dir.path().join("e2.csv");
        let l2 = dir.path().join("l2.csv");
        write_expression_csv(&ds, &e2).unwrap();
        write_labels_csv(&ds, &l2).unwrap();
        assert_eq!(load_expression_csv(&e2, &l2).unwrap(), ds);
    }

    #[test]
    fn csv_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let e = write(dir.path(), "e.csv", "sample_id,A,B\nx1,1,2\nx2,3,4\n");
        let l = write(dir.path(), "l.csv", "sample_id,domain,label\nx1,a,0\n");
        let err = load_expression_csv(&e, &l).unwrap_err().to_string();
        assert!(err.contains("x2"), "{err}");

        let l = write(dir.path(), "l2.csv", "sample_id,domain,label\nx1,a,0\nx1,a,1\nx2,b,0\n");
        let err = load_expression_csv(&e, &l).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");

        let l = write(dir.path(), "l3.csv", "sample_id,domain,label\nx1,a,0\nx9,b,0\n");
        let err = load_expression_csv(&e, &l).unwrap_err().to_string();
        assert!(err.contains("unknown sample id `x9`"), "{err}");

        let bad = write(dir.path(), "bad.csv", "sample_id,A,B\nx1,1,oops\n");
        let l = write(dir.path(), "l4.csv", "sample_id,domain,label\nx1,a,0\n");
        match load_expression_csv(&bad, &l).unwrap_err() {
            Error::Parse { row, col, .. } => assert_eq!((row, col), (2, 3)),
            other => panic!("{other}"),
        }
        let ragged = write(dir.path(), "r.csv", "sample_id,A,B\nx1,1\n");
        assert!(matches!(load_expression_csv(&ragged, &l), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn collapse_sums_duplicates_in_first_occurrence_order() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        let names: Vec<String> = ["A", "B", "A"].iter().map(|s| s.to_string()).collect();
        let (y, n) = collapse_duplicate_genes(&x, &names).unwrap();
        assert_eq!(n, vec!["A", "B"]);
        assert_eq!(y.row(0), &[4.0, 2.0]);

        let uniq: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let (y, n) = collapse_duplicate_genes(&x, &uniq).unwrap();
        assert_eq!((y, n), (x, uniq));
    }

    #[test]
    fn collapse_reproduces_symbol_count_at_full_scale() {
        // 41124 mapped symbols of which 39979 are distinct
        let distinct = 39_979usize;
        let total = 41_124usize;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut names: Vec<String> = (0..distinct).map(|i| format!("G{i}")).collect();
        for _ in distinct..total {
            let pick = rand::Rng::random_range(&mut rng, 0..distinct);
            names.push(format!("G{pick}"));
        }
        names.shuffle(&mut rng);
        let x = Matrix::filled(1, total, 1.0);
        let (y, n) = collapse_duplicate_genes(&x, &names).unwrap();
        assert_eq!(n.len(), distinct);
        assert_eq!(y.sum(), total as f64);
    }

    #[test]
    fn log_transform_values_and_errors() {
        let x = Matrix::row_vector(&[0.0, std::f64::consts::E - 1.0]);
        let y = log_transform(&x).unwrap();
        assert_eq!(y[(0, 0)], 0.0);
        assert!((y[(0, 1)] - 1.0).abs() < 1e-15);
        assert!(log_transform(&Matrix::row_vector(&[1.0, -0.5])).is_err());
    }

    #[test]
    fn labeled_matrix_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = Matrix::from_rows(&[[0.1 + 0.2, -1e-300], [std::f64::consts::PI, 7.0]]);
        let lm = LabeledMatrix::new("sample_id", vec!["a".into(), "b".into()], vec!["x".into(), "y".into()], m).unwrap();
        lm.write_csv(&path).unwrap();
        assert_eq!(LabeledMatrix::read_csv(&path).unwrap(), lm);
    }
}
