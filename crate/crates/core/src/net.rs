//! The three-branch domain-adversarial network.
//!
//! ```text
//! x ─ fc1 ─ bn1 ─ dropout1 ─ LeakyReLU ─┬─ label predictor  ─ σ       → P(y = 1)
//!      (feature extractor)              └─ GRL(λ) ─ domain classifier ─ softmax → P(d)
//! ```
//!
//! Both heads are `fc1 → bn1 → dropout1 → LeakyReLU → fc2 → bn2 → dropout2 →
//! LeakyReLU → fc3`. The three captured layers are the outputs of the last
//! dropout/LeakyReLU block of each branch.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Mode, Normalization, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const CAPTURE_CHUNK: usize = 256;

/// Hidden layers whose outputs can be captured for analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerId {
    #[serde(rename = "feature_extractor.dropout1")]
    FeatureExtractorDropout1,
    #[serde(rename = "label_predictor.dropout2")]
    LabelPredictorDropout2,
    #[serde(rename = "domain_classifier.dropout2")]
    DomainClassifierDropout2,
}

impl LayerId {
    pub const ALL: [LayerId; 3] = [
        LayerId::FeatureExtractorDropout1,
        LayerId::LabelPredictorDropout2,
        LayerId::DomainClassifierDropout2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::FeatureExtractorDropout1 => "feature_extractor.dropout1",
            LayerId::LabelPredictorDropout2 => "label_predictor.dropout2",
            LayerId::DomainClassifierDropout2 => "domain_classifier.dropout2",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::UnknownLayer {
                given: s.to_string(),
                valid: LayerId::ALL.map(LayerId::name).join(", "),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DannConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_domains: usize,
    pub dropout_p: f64,
    pub leaky_slope: f64,
    pub lambda: f64,
}

impl Default for DannConfig {
    fn default() -> Self {
        DannConfig {
            input_dim: 1,
            hidden_dim: 64,
            n_domains: 2,
            dropout_p: 0.1,
            leaky_slope: 0.01,
            lambda: 0.01,
        }
    }
}

impl DannConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.hidden_dim < 1 {
            return Err(Error::Config("input_dim and hidden_dim must be at least 1".into()));
        }
        if self.n_domains < 2 {
            return Err(Error::Config(format!("n_domains must be at least 2, got {}", self.n_domains)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope must lie in (0, 1), got {}", self.leaky_slope)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Fully connected layer, `weight` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn he<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Dense {
            weight: Matrix::from_fn(fan_in, fan_out, |_, _| normal.sample(rng)),
            bias: Matrix::zeros(1, fan_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running: RunningStats,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            running: RunningStats::new(width),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub fc1: Dense,
    pub bn1: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub fc1: Dense,
    pub bn1: BatchNorm,
    pub fc2: Dense,
    pub bn2: BatchNorm,
    pub fc3: Dense,
}

impl Head {
    fn init<R: Rng + ?Sized>(hidden: usize, out: usize, rng: &mut R) -> Self {
        Head {
            fc1: Dense::he(hidden, hidden, rng),
            bn1: BatchNorm::new(hidden),
            fc2: Dense::he(hidden, hidden, rng),
            bn2: BatchNorm::new(hidden),
            fc3: Dense::he(hidden, out, rng),
        }
    }
}

/// All network weights plus batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: DannConfig,
    pub feature_extractor: FeatureExtractor,
    pub label_predictor: Head,
    pub domain_classifier: Head,
}

/// He-normal weights, zero biases, unit batchnorm scale.
pub fn init_params<R: Rng + ?Sized>(config: &DannConfig, rng: &mut R) -> Result<ModelParams> {
    config.validate()?;
    let h = config.hidden_dim;
    let feature_extractor = FeatureExtractor {
        fc1: Dense::he(config.input_dim, h, rng),
        bn1: BatchNorm::new(h),
    };
    let label_predictor = Head::init(h, 1, rng);
    let domain_classifier = Head::init(h, config.n_domains, rng);
    Ok(ModelParams {
        config: config.clone(),
        feature_extractor,
        label_predictor,
        domain_classifier,
    })
}

impl ModelParams {
    /// Trainable tensors with their canonical names, in canonical order.
    pub fn trainable(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(24);
        let fe = &self.feature_extractor;
        push_dense(&mut out, "feature_extractor.fc1", &fe.fc1);
        push_bn(&mut out, "feature_extractor.bn1", &fe.bn1);
        for (prefix, head) in [("label_predictor", &self.label_predictor), ("domain_classifier", &self.domain_classifier)] {
            push_dense(&mut out, &format!("{prefix}.fc1"), &head.fc1);
            push_bn(&mut out, &format!("{prefix}.bn1"), &head.bn1);
            push_dense(&mut out, &format!("{prefix}.fc2"), &head.fc2);
            push_bn(&mut out, &format!("{prefix}.bn2"), &head.bn2);
            push_dense(&mut out, &format!("{prefix}.fc3"), &head.fc3);
        }
        out
    }

    /// Mutable trainable tensors in the same order as [`ModelParams::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let fe = &mut self.feature_extractor;
        let mut out: Vec<&mut Matrix> = vec![
            &mut fe.fc1.weight,
            &mut fe.fc1.bias,
            &mut fe.bn1.gamma,
            &mut fe.bn1.beta,
        ];
        for head in [&mut self.label_predictor, &mut self.domain_classifier] {
            out.push(&mut head.fc1.weight);
            out.push(&mut head.fc1.bias);
            out.push(&mut head.bn1.gamma);
            out.push(&mut head.bn1.beta);
            out.push(&mut head.fc2.weight);
            out.push(&mut head.fc2.bias);
            out.push(&mut head.bn2.gamma);
            out.push(&mut head.bn2.beta);
            out.push(&mut head.fc3.weight);
            out.push(&mut head.fc3.bias);
        }
        out
    }

    /// Running statistics in forward order: fe.bn1, lp.bn1, lp.bn2, dc.bn1, dc.bn2.
    fn running_mut(&mut self) -> [&mut RunningStats; 5] {
        [
            &mut self.feature_extractor.bn1.running,
            &mut self.label_predictor.bn1.running,
            &mut self.label_predictor.bn2.running,
            &mut self.domain_classifier.bn1.running,
            &mut self.domain_classifier.bn2.running,
        ]
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (rs, bs) in self.running_mut().into_iter().zip(stats) {
            rs.update(bs, BN_MOMENTUM);
        }
    }

    /// Every tensor (trainable and running buffers) keyed by canonical name.
    pub fn named_tensors(&self) -> BTreeMap<String, Matrix> {
        let mut map: BTreeMap<String, Matrix> = self
            .trainable()
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect();
        let mut put_running = |name: String, rs: &RunningStats| {
            map.insert(format!("{name}.running_mean"), Matrix::row_vector(&rs.mean));
            map.insert(format!("{name}.running_var"), Matrix::row_vector(&rs.var));
        };
        put_running("feature_extractor.bn1".into(), &self.feature_extractor.bn1.running);
        for (prefix, head) in [("label_predictor", &self.label_predictor), ("domain_classifier", &self.domain_classifier)] {
            put_running(format!("{prefix}.bn1"), &head.bn1.running);
            put_running(format!("{prefix}.bn2"), &head.bn2.running);
        }
        map
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_named_tensors(config: DannConfig, tensors: &BTreeMap<String, Matrix>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = init_params(&config, &mut rng)?;
        let expected = params.named_tensors();
        for (name, want) in &expected {
            let got = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor `{name}`")))?;
            if got.shape() != want.shape() {
                return Err(Error::Dimension {
                    op: "checkpoint tensor",
                    left: want.shape(),
                    right: got.shape(),
                });
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Config(format!("checkpoint has unexpected tensor `{extra}`")));
        }
        let names: Vec<String> = params.trainable().into_iter().map(|(k, _)| k).collect();
        for (slot, name) in params.trainable_mut().into_iter().zip(&names) {
            *slot = tensors[name].clone();
        }
        let running_names = [
            "feature_extractor.bn1",
            "label_predictor.bn1",
            "label_predictor.bn2",
            "domain_classifier.bn1",
            "domain_classifier.bn2",
        ];
        for (rs, name) in params.running_mut().into_iter().zip(running_names) {
            rs.mean = tensors[&format!("{name}.running_mean")].as_slice().to_vec();
            rs.var = tensors[&format!("{name}.running_var")].as_slice().to_vec();
        }
        Ok(params)
    }
}

fn push_dense<'a>(out: &mut Vec<(String, &'a Matrix)>, name: &str, d: &'a Dense) {
    out.push((format!("{name}.weight"), &d.weight));
    out.push((format!("{name}.bias"), &d.bias));
}

fn push_bn<'a>(out: &mut Vec<(String, &'a Matrix)>, name: &str, b: &'a BatchNorm) {
    out.push((format!("{name}.weight"), &b.gamma));
    out.push((format!("{name}.bias"), &b.beta));
}

/// Hidden-layer outputs captured for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub layer_id: LayerId,
    pub values: Matrix,
    pub epoch: usize,
}

/// A recorded forward pass, ready for [`Graph::backward`].
pub struct ForwardPass {
    pub graph: Graph,
    pub input: Var,
    /// Trainable parameter leaves in canonical order.
    pub params: Vec<Var>,
    pub label_prob: Var,
    pub domain_prob: Var,
    activations: [Var; 3],
    /// Train-mode batch statistics in forward order; empty in eval mode.
    pub batch_stats: Vec<BatchStats>,
}

impl ForwardPass {
    pub fn activation(&self, layer: LayerId) -> Var {
        self.activations[layer.slot()]
    }
}

struct Block<'a> {
    fc: &'a Dense,
    bn: &'a BatchNorm,
}

/// Builds the network graph for `x`. In train mode batchnorm uses batch
/// statistics and dropout is active; in eval mode running statistics are
/// used and dropout is the identity.
pub fn build_forward<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &Matrix,
    mode: Mode,
    lambda: f64,
    input_requires_grad: bool,
    rng: &mut R,
) -> Result<ForwardPass> {
    let cfg = &params.config;
    if x.cols() != cfg.input_dim {
        return Err(Error::Dimension {
            op: "forward input",
            left: x.shape(),
            right: (cfg.input_dim, cfg.hidden_dim),
        });
    }
    let mut graph = Graph::new();
    let input = if input_requires_grad {
        graph.param(x.clone())
    } else {
        graph.constant(x.clone())
    };
    let mut leaves = Vec::with_capacity(24);
    let mut batch_stats = Vec::new();
    let mut ctx = BlockCtx {
        graph: &mut graph,
        leaves: &mut leaves,
        batch_stats: &mut batch_stats,
        mode,
        p: cfg.dropout_p,
        slope: cfg.leaky_slope,
    };

    let fe = &params.feature_extractor;
    let features = ctx.block(input, Block { fc: &fe.fc1, bn: &fe.bn1 }, rng)?;

    let lp = &params.label_predictor;
    let h = ctx.block(features, Block { fc: &lp.fc1, bn: &lp.bn1 }, rng)?;
    let label_hidden = ctx.block(h, Block { fc: &lp.fc2, bn: &lp.bn2 }, rng)?;
    let logit = ctx.dense(label_hidden, &lp.fc3)?;

    let reversed = ctx.graph.grl(features, lambda);
    let dc = &params.domain_classifier;
    let h = ctx.block(reversed, Block { fc: &dc.fc1, bn: &dc.bn1 }, rng)?;
    let domain_hidden = ctx.block(h, Block { fc: &dc.fc2, bn: &dc.bn2 }, rng)?;
    let domain_logits = ctx.dense(domain_hidden, &dc.fc3)?;

    let label_prob = graph.sigmoid(logit);
    let domain_prob = graph.softmax_rows(domain_logits);
    Ok(ForwardPass {
        graph,
        input,
        params: leaves,
        label_prob,
        domain_prob,
        activations: [features, label_hidden, domain_hidden],
        batch_stats,
    })
}

struct BlockCtx<'g> {
    graph: &'g mut Graph,
    leaves: &'g mut Vec<Var>,
    batch_stats: &'g mut Vec<BatchStats>,
    mode: Mode,
    p: f64,
    slope: f64,
}

impl BlockCtx<'_> {
    fn dense(&mut self, x: Var, d: &Dense) -> Result<Var> {
        let w = self.graph.param(d.weight.clone());
        let b = self.graph.param(d.bias.clone());
        self.leaves.extend([w, b]);
        self.graph.linear(x, w, b)
    }

    /// fc → bn → dropout → LeakyReLU
    fn block<R: Rng + ?Sized>(&mut self, x: Var, blk: Block<'_>, rng: &mut R) -> Result<Var> {
        let z = self.dense(x, blk.fc)?;
        let gamma = self.graph.param(blk.bn.gamma.clone());
        let beta = self.graph.param(blk.bn.beta.clone());
        self.leaves.extend([gamma, beta]);
        let norm = match self.mode {
            Mode::Train => Normalization::Batch,
            Mode::Eval => Normalization::Running(&blk.bn.running),
        };
        let (z, stats) = self.graph.batch_norm(z, gamma, beta, norm, BN_EPS)?;
        self.batch_stats.extend(stats);
        let z = self.graph.dropout(z, self.p, self.mode, rng);
        Ok(self.graph.leaky_relu(z, self.slope))
    }
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub label_prob: Vec<f64>,
    pub domain_prob: Matrix,
    pub activations: BTreeMap<LayerId, Matrix>,
}

pub fn forward_full<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &Matrix,
    mode: Mode,
    lambda: f64,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let fp = build_forward(params, x, mode, lambda, false, rng)?;
    let activations = LayerId::ALL
        .into_iter()
        .map(|l| (l, fp.graph.value(fp.activation(l)).clone()))
        .collect();
    Ok(ForwardOutput {
        label_prob: fp.graph.value(fp.label_prob).as_slice().to_vec(),
        domain_prob: fp.graph.value(fp.domain_prob).clone(),
        activations,
    })
}

/// Eval-mode forward over all rows in fixed-size chunks; chunks may run in
/// parallel but are concatenated in row order.
fn eval_chunks(params: &ModelParams, x: &Matrix) -> Result<Vec<ForwardOutput>> {
    let starts: Vec<usize> = (0..x.rows()).step_by(CAPTURE_CHUNK).collect();
    starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CAPTURE_CHUNK).min(x.rows())).collect();
            // eval mode consumes no randomness
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            forward_full(params, &x.select_rows(&idx), Mode::Eval, params.config.lambda, &mut rng)
        })
        .collect()
}

/// Eval-mode `P(y = 1)` for every row of `x`.
pub fn predict_label(params: &ModelParams, x: &Matrix) -> Result<Vec<f64>> {
    Ok(eval_chunks(params, x)?
        .into_iter()
        .flat_map(|o| o.label_prob)
        .collect())
}

/// Eval-mode label and domain probabilities for every row of `x`.
pub fn predict(params: &ModelParams, x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let chunks = eval_chunks(params, x)?;
    let mut labels = Vec::with_capacity(x.rows());
    let mut domain = Vec::with_capacity(x.rows() * params.config.n_domains);
    for c in chunks {
        labels.extend(c.label_prob);
        domain.extend_from_slice(c.domain_prob.as_slice());
    }
    Ok((labels, Matrix::from_vec(x.rows(), params.config.n_domains, domain)?))
}

/// Eval-mode capture of the requested layers over all rows of `x`.
pub fn capture_activations(
    params: &ModelParams,
    x: &Matrix,
    layers: &[LayerId],
    epoch: usize,
) -> Result<Vec<ActivationMatrix>> {
    let chunks = eval_chunks(params, x)?;
    let h = params.config.hidden_dim;
    Ok(layers
        .iter()
        .map(|&layer| {
            let mut data = Vec::with_capacity(x.rows() * h);
            for c in &chunks {
                data.extend_from_slice(c.activations[&layer].as_slice());
            }
            ActivationMatrix {
                layer_id: layer,
                values: Matrix::from_vec(x.rows(), h, data).expect("chunk shapes are consistent"),
                epoch,
            }
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: DannConfig,
    tensors: BTreeMap<String, TensorRecord>,
}

const CHECKPOINT_FORMAT: &str = "advrep-dann";
const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_json(params: &ModelParams) -> Result<String> {
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(k, m)| {
            let shape = [m.rows(), m.cols()];
            (k, TensorRecord { shape, data: m.into_vec() })
        })
        .collect();
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        tensors,
    };
    Ok(serde_json::to_string(&ck)?)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_json(params)?).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(text: &str) -> Result<ModelParams> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    let mut tensors = BTreeMap::new();
    for (k, t) in ck.tensors {
        tensors.insert(k, Matrix::from_vec(t.shape[0], t.shape[1], t.data)?);
    }
    ModelParams::from_named_tensors(ck.config, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}
