//! Adversarial training: AdamW, stratified folds, epoch loop and snapshots.
//!
//! One combined backward pass per batch through `L_y + L_d`; the gradient
//! reversal node inside the network turns the minimisation of `L_d` into a
//! maximisation for the feature extractor.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{self, capture_activations, init_params, ActivationMatrix, DannConfig, LayerId, ModelParams};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub hidden_dim: usize,
    pub dropout_p: f64,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            lambda: 0.01,
            batch_size: 32,
            epochs: 150,
            folds: 5,
            hidden_dim: 64,
            dropout_p: 0.1,
            leaky_slope: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: 1000 hidden units, batch 128, 499 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 499,
            hidden_dim: 1000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adam_eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn dann_config(&self, input_dim: usize, n_domains: usize) -> DannConfig {
        DannConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            n_domains,
            dropout_p: self.dropout_p,
            leaky_slope: self.leaky_slope,
            lambda: self.lambda,
        }
    }
}

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        AdamW {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl OptimizerState {
    pub fn for_shapes(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        OptimizerState { m, v, t: 0 }
    }

    pub fn for_model(params: &ModelParams) -> Self {
        Self::for_shapes(params.trainable().into_iter().map(|(_, m)| m.shape()))
    }
}

/// One AdamW step with decoupled weight decay:
///
/// ```text
/// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
/// m̂ = m/(1−β₁ᵗ)            v̂ = v/(1−β₂ᵗ)
/// θ ← θ − η(m̂/(√v̂ + ε) + w·θ)
/// ```
///
/// `names` label the tensors for the non-finite-gradient diagnostic.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    names: &[String],
    state: &mut OptimizerState,
    hp: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adamw got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "adamw gradient",
                left: p.shape(),
                right: g.shape(),
            });
        }
        if !g.all_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("tensor #{i}"));
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let theta = p.as_mut_slice();
        for (k, &gk) in g.as_slice().iter().enumerate() {
            let mk = &mut m.as_mut_slice()[k];
            *mk = hp.beta1 * *mk + (1.0 - hp.beta1) * gk;
            let vk = &mut v.as_mut_slice()[k];
            *vk = hp.beta2 * *vk + (1.0 - hp.beta2) * gk * gk;
            let m_hat = *mk / bc1;
            let v_hat = *vk / bc2;
            theta[k] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * theta[k]);
        }
    }
    Ok(())
}

/// AdamW step over every trainable tensor of the network.
pub fn step_model(params: &mut ModelParams, grads: &[Matrix], state: &mut OptimizerState, hp: &AdamW) -> Result<()> {
    let names: Vec<String> = params.trainable().into_iter().map(|(n, _)| n).collect();
    let mut slots = params.trainable_mut();
    adamw_step(&mut slots, grads, &names, state, hp)
}

/// Adds the label BCE and domain CE nodes. The adversarial sign is not
/// applied here: it lives in the gradient reversal node upstream of the
/// domain head, so both losses are minimised.
pub fn dann_batch_loss(graph: &mut Graph, label_prob: Var, domain_prob: Var, y: &[u8], d: &[usize]) -> Result<(Var, Var)> {
    let targets: Vec<f64> = y
        .iter()
        .map(|&v| match v {
            0 => Ok(0.0),
            1 => Ok(1.0),
            other => Err(Error::Label(format!("label {other} is not 0 or 1"))),
        })
        .collect::<Result<_>>()?;
    let ly = graph.bce_loss(label_prob, &targets)?;
    let ld = graph.ce_loss(domain_prob, d)?;
    Ok((ly, ld))
}

/// `k` stratified folds as (train, validation) index pairs.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Contract(format!("stratified k-fold needs k >= 2, got {k}")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} members, fewer than {k} folds",
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0;
    for mut members in by_class {
        members.shuffle(&mut rng);
        for i in members {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    Ok((0..k)
        .map(|f| {
            let mut val = folds[f].clone();
            val.sort_unstable();
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            train.sort_unstable();
            (train, val)
        })
        .collect())
}

/// Holds out `round(test_fraction · n_c)` members of every class `c`.
/// Returns sorted (train, test) indices.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Contract(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut members in by_class {
        members.shuffle(&mut rng);
        let k = (test_fraction * members.len() as f64).round() as usize;
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub label_loss: f64,
    pub label_acc: f64,
    pub domain_loss: f64,
    pub domain_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: SplitMetrics,
    pub val: Option<SplitMetrics>,
}

fn count_correct(label_prob: &[f64], y: &[u8], domain_prob: &Matrix, d: &[usize]) -> (usize, usize) {
    let label_ok = label_prob
        .iter()
        .zip(y)
        .filter(|(&p, &l)| u8::from(p >= 0.5) == l)
        .count();
    let domain_ok = domain_prob
        .iter_rows()
        .zip(d)
        .filter(|(row, &k)| argmax(row) == k)
        .count();
    (label_ok, domain_ok)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// One pass over `indices` in shuffled mini-batches. Remainder batches of a
/// single sample are dropped (train-mode batchnorm needs two rows).
pub fn train_epoch(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SplitMetrics> {
    if indices.is_empty() {
        return Err(Error::Contract("train_epoch needs at least one sample".into()));
    }
    let hp = AdamW::from(cfg);
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut sums = SplitMetrics::default();
    let mut seen = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        if batch.len() < 2 {
            continue;
        }
        let x = data.x.select_rows(batch);
        let y: Vec<u8> = batch.iter().map(|&i| data.label[i]).collect();
        let d: Vec<usize> = batch.iter().map(|&i| data.domain[i]).collect();
        let mut fp = net::build_forward(params, &x, Mode::Train, cfg.lambda, false, rng)?;
        let (ly, ld) = dann_batch_loss(&mut fp.graph, fp.label_prob, fp.domain_prob, &y, &d)?;
        let total = fp.graph.add(ly, ld)?;
        let (lyv, ldv) = (fp.graph.value(ly)[(0, 0)], fp.graph.value(ld)[(0, 0)]);
        if !lyv.is_finite() || !ldv.is_finite() {
            return Err(Error::NonFinite(format!("batch loss (label {lyv}, domain {ldv})")));
        }
        let grads = fp.graph.backward(total)?;
        let grads: Vec<Matrix> = fp.params.iter().map(|&v| grads.get_or_zeros(v, &fp.graph)).collect();
        let lp = fp.graph.value(fp.label_prob).as_slice().to_vec();
        let (lok, dok) = count_correct(&lp, &y, fp.graph.value(fp.domain_prob), &d);

        step_model(params, &grads, state, &hp)?;
        params.update_running_stats(&fp.batch_stats);

        let b = batch.len() as f64;
        sums.label_loss += lyv * b;
        sums.domain_loss += ldv * b;
        sums.label_acc += lok as f64;
        sums.domain_acc += dok as f64;
        seen += batch.len();
    }
    let n = seen.max(1) as f64;
    Ok(SplitMetrics {
        label_loss: sums.label_loss / n,
        label_acc: sums.label_acc / n,
        domain_loss: sums.domain_loss / n,
        domain_acc: sums.domain_acc / n,
    })
}

/// Eval-mode losses and accuracies on `indices`.
pub fn evaluate(params: &ModelParams, data: &Dataset, indices: &[usize]) -> Result<SplitMetrics> {
    let x = data.x.select_rows(indices);
    let y: Vec<u8> = indices.iter().map(|&i| data.label[i]).collect();
    let d: Vec<usize> = indices.iter().map(|&i| data.domain[i]).collect();
    let (lp, dp) = net::predict(params, &x)?;
    let mut g = Graph::new();
    let lpv = g.constant(Matrix::from_vec(lp.len(), 1, lp.clone())?);
    let dpv = g.constant(dp.clone());
    let (ly, ld) = dann_batch_loss(&mut g, lpv, dpv, &y, &d)?;
    let (lok, dok) = count_correct(&lp, &y, &dp, &d);
    let n = indices.len().max(1) as f64;
    Ok(SplitMetrics {
        label_loss: g.value(ly)[(0, 0)],
        label_acc: lok as f64 / n,
        domain_loss: g.value(ld)[(0, 0)],
        domain_acc: dok as f64 / n,
    })
}

fn fold_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains from a fresh initialisation on `train`, evaluating on `val` after
/// every epoch. `on_epoch` sees the parameters at the end of each epoch.
pub fn train_run(
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    stream: u64,
    mut on_epoch: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    cfg.validate()?;
    let mut rng = fold_rng(cfg.seed, stream);
    let mut params = init_params(&cfg.dann_config(data.n_features(), data.n_domains), &mut rng)?;
    let mut state = OptimizerState::for_model(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let train_m = train_epoch(&mut params, &mut state, data, train, cfg, &mut rng)?;
        let val_m = if val.is_empty() {
            None
        } else {
            Some(evaluate(&params, data, val)?)
        };
        history.push(EpochRecord {
            epoch,
            train: train_m,
            val: val_m,
        });
        on_epoch(epoch, &params)?;
    }
    Ok((params, history))
}

/// Per-fold histories plus across-fold summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<Vec<EpochRecord>>,
    pub mean: Vec<EpochRecord>,
    pub std: Vec<EpochRecord>,
}

/// Stratified (by label) k-fold cross-validation; folds run in parallel and
/// are merged by fold index.
pub fn run_cv(data: &Dataset, cfg: &TrainConfig) -> Result<CvResult> {
    let splits = stratified_kfold(&data.labels_usize(), cfg.folds, cfg.seed)?;
    let folds: Vec<Vec<EpochRecord>> = splits
        .par_iter()
        .enumerate()
        .map(|(f, (train, val))| train_run(data, train, val, cfg, 1 + f as u64, |_, _| Ok(())).map(|(_, h)| h))
        .collect::<Result<_>>()?;
    let (mean, std) = summarize(&folds);
    Ok(CvResult { folds, mean, std })
}

fn mean_std(vals: &[SplitMetrics]) -> (SplitMetrics, SplitMetrics) {
    let fields = |m: &SplitMetrics| [m.label_loss, m.label_acc, m.domain_loss, m.domain_acc];
    let k = vals.len().max(1) as f64;
    let mut mean = [0.0; 4];
    for v in vals {
        for (a, b) in mean.iter_mut().zip(fields(v)) {
            *a += b / k;
        }
    }
    let mut var = [0.0; 4];
    for v in vals {
        for ((a, b), m) in var.iter_mut().zip(fields(v)).zip(mean) {
            *a += (b - m) * (b - m) / k;
        }
    }
    let to = |a: [f64; 4]| SplitMetrics {
        label_loss: a[0],
        label_acc: a[1],
        domain_loss: a[2],
        domain_acc: a[3],
    };
    (to(mean), to(var.map(f64::sqrt)))
}

fn summarize(folds: &[Vec<EpochRecord>]) -> (Vec<EpochRecord>, Vec<EpochRecord>) {
    let epochs = folds.iter().map(Vec::len).min().unwrap_or(0);
    let mut mean = Vec::with_capacity(epochs);
    let mut std = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let train: Vec<SplitMetrics> = folds.iter().map(|f| f[e].train).collect();
        let val: Option<Vec<SplitMetrics>> = folds.iter().map(|f| f[e].val).collect();
        let (tm, ts) = mean_std(&train);
        let (vm, vs) = match val {
            Some(v) => {
                let (m, s) = mean_std(&v);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        mean.push(EpochRecord { epoch: e + 1, train: tm, val: vm });
        std.push(EpochRecord { epoch: e + 1, train: ts, val: vs });
    }
    (mean, std)
}

/// Activations of the three capture layers over the full dataset at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub activations: Vec<ActivationMatrix>,
}

#[derive(Clone, Debug)]
pub struct TrainingRecord {
    pub params: ModelParams,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub history: Vec<EpochRecord>,
    pub snapshots: Vec<Snapshot>,
}

/// Trains on a stratified 80/20 split and captures every layer on the full
/// dataset at each requested epoch.
pub fn run_training_with_snapshots(data: &Dataset, cfg: &TrainConfig, snapshot_epochs: &[usize]) -> Result<TrainingRecord> {
    if let Some(&e) = snapshot_epochs.iter().find(|&&e| e < 1 || e > cfg.epochs) {
        return Err(Error::Config(format!("snapshot epoch {e} outside 1..={}", cfg.epochs)));
    }
    let (train, val) = stratified_kfold(&data.labels_usize(), 5, cfg.seed)?.swap_remove(0);
    let mut snapshots = Vec::new();
    let (params, history) = train_run(data, &train, &val, cfg, 0, |epoch, params| {
        if snapshot_epochs.contains(&epoch) {
            snapshots.push(Snapshot {
                epoch,
                activations: capture_activations(params, &data.x, &LayerId::ALL, epoch)?,
            });
        }
        Ok(())
    })?;
    Ok(TrainingRecord {
        params,
        train_indices: train,
        val_indices: val,
        history,
        snapshots,
    })
}

/// Writes `epoch,fold,split,label_loss,label_acc,domain_loss,domain_acc`.
pub fn write_metrics_csv(path: &Path, runs: &[(String, &[EpochRecord])]) -> Result<()> {
    let mut out = String::from("epoch,fold,split,label_loss,label_acc,domain_loss,domain_acc\n");
    for (fold, records) in runs {
        for r in records.iter() {
            let mut row = |split: &str, m: &SplitMetrics| {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.epoch, fold, split, m.label_loss, m.label_acc, m.domain_loss, m.domain_acc
                ));
            };
            row("train", &r.train);
            if let Some(v) = &r.val {
                row("val", v);
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
