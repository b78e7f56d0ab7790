//! Feature attribution: exact Shapley values, KernelSHAP, Integrated
//! Gradients and attribution of boosted-tree surrogates fit on hidden layers.
//!
//! Every Shapley-style method here uses mean masking: a feature outside the
//! coalition is replaced by its background mean, so the value of a coalition
//! is a single model evaluation and the exact oracle stays enumerable.

mod surrogate;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::error::{Error, Result};
use crate::net::{self, ModelParams};
use crate::tensor::Matrix;

pub use surrogate::{train_surrogate, Booster, SurrogateConfig, SurrogateModel, Tree};

/// Largest feature count [`exact_shapley`] will enumerate.
pub const EXACT_MAX_FEATURES: usize = 12;
pub const DEFAULT_BACKGROUND_SIZE: usize = 50;
pub const VIOLIN_ALPHA: f64 = -2.0;
pub const VIOLIN_BASE: f64 = 10.0;
pub const VIOLIN_EPS: f64 = 1e-9;

const COND_FLOOR: f64 = 1e-6;
const PINV_RCOND: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactShapley,
    KernelShap,
    IntegratedGradients,
}

/// Per-sample attributions for one explained scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub values: Matrix,
    /// Reference output the attributions of each row sum towards: the model
    /// at the background mean for Shapley methods, at the baseline for IG.
    pub base_value: f64,
    /// Mean model output over the background rows.
    pub expected_value: f64,
    pub method: Method,
    pub target: String,
    pub feature_names: Vec<String>,
}

impl AttributionMatrix {
    /// Column-wise mean absolute attribution.
    pub fn mean_abs(&self) -> Vec<f64> {
        let n = self.values.rows().max(1) as f64;
        let mut out = vec![0.0; self.values.cols()];
        for row in self.values.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v.abs() / n;
            }
        }
        out
    }

    /// Indices of the `k` largest mean |φ| features, ties broken by index.
    pub fn top_features(&self, k: usize) -> Vec<usize> {
        top_k(&self.mean_abs(), k)
    }
}

pub(crate) fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Reference rows for masking.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundSet {
    pub rows: Matrix,
    /// Dataset rows the reference was drawn from, when known.
    pub indices: Vec<usize>,
    pub policy: String,
}

impl BackgroundSet {
    pub fn new(rows: Matrix, policy: impl Into<String>) -> Result<Self> {
        if rows.rows() == 0 {
            return Err(Error::Contract("background set needs at least one row".into()));
        }
        Ok(BackgroundSet {
            rows,
            indices: Vec::new(),
            policy: policy.into(),
        })
    }

    /// Up to `m` rows of `pool`, balanced across the two labels. When one
    /// class is short the other fills the remainder.
    pub fn stratified(x: &Matrix, labels: &[u8], pool: &[usize], m: usize, seed: u64) -> Result<Self> {
        if m == 0 || pool.is_empty() {
            return Err(Error::Contract("background set needs at least one row".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for &i in pool {
            by_class[usize::from(labels[i] != 0)].push(i);
        }
        for c in by_class.iter_mut() {
            c.shuffle(&mut rng);
        }
        let half = m / 2;
        let take0 = by_class[0].len().min(half.max(m.saturating_sub(by_class[1].len())));
        let take1 = (m - take0).min(by_class[1].len());
        let mut indices: Vec<usize> = by_class[0][..take0].iter().chain(&by_class[1][..take1]).copied().collect();
        indices.sort_unstable();
        Ok(BackgroundSet {
            rows: x.select_rows(&indices),
            indices,
            policy: format!("label-balanced sample of {m} rows, seed {seed}"),
        })
    }

    /// The same reference samples, taken from another representation.
    pub fn reindexed(&self, x: &Matrix) -> Result<Self> {
        if self.indices.is_empty() {
            return Err(Error::Contract("background set has no source indices".into()));
        }
        Ok(BackgroundSet {
            rows: x.select_rows(&self.indices),
            indices: self.indices.clone(),
            policy: self.policy.clone(),
        })
    }

    pub fn mean(&self) -> Vec<f64> {
        self.rows.col_means()
    }
}

/// Attributions of one sample together with the two reference outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapRow {
    pub phi: Vec<f64>,
    /// Model output at the background mean.
    pub base: f64,
    /// Model output at the explained sample.
    pub output: f64,
}

fn eval_batch<F>(f: &F, rows: &Matrix) -> Result<Vec<f64>>
where
    F: Fn(&Matrix) -> Result<Vec<f64>> + ?Sized,
{
    let out = f(rows)?;
    if out.len() != rows.rows() {
        return Err(Error::Dimension {
            op: "model output",
            left: rows.shape(),
            right: (out.len(), 1),
        });
    }
    if let Some(v) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("model output {v}")));
    }
    Ok(out)
}

fn check_widths(x: &[f64], reference: &[f64]) -> Result<()> {
    if x.len() != reference.len() {
        return Err(Error::Dimension {
            op: "explained sample vs background",
            left: (1, x.len()),
            right: (1, reference.len()),
        });
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact Shapley values by enumerating all `2^d` coalitions.
pub fn exact_shapley<F>(f: &F, x: &[f64], background: &BackgroundSet) -> Result<ShapRow>
where
    F: Fn(&Matrix) -> Result<Vec<f64>> + ?Sized,
{
    let reference = background.mean();
    check_widths(x, &reference)?;
    let d = x.len();
    if d > EXACT_MAX_FEATURES {
        return Err(Error::Contract(format!(
            "exact Shapley enumeration is limited to {EXACT_MAX_FEATURES} features, got {d}"
        )));
    }
    let n_masks = 1usize << d;
    let rows = Matrix::from_fn(n_masks, d, |mask, j| if mask >> j & 1 == 1 { x[j] } else { reference[j] });
    let v = eval_batch(f, &rows)?;
    // weight(s) = s!(d−s−1)!/d! = 1/(d·C(d−1, s))
    let weight: Vec<f64> = (0..d).map(|s| 1.0 / (d as f64 * binomial(d - 1, s))).collect();
    let mut phi = vec![0.0; d];
    for (j, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        for mask in (0..n_masks).filter(|m| m & bit == 0) {
            *p += weight[mask.count_ones() as usize] * (v[mask | bit] - v[mask]);
        }
    }
    Ok(ShapRow {
        phi,
        base: v[0],
        output: v[n_masks - 1],
    })
}

/// KernelSHAP against the background mean.
///
/// All coalitions are enumerated when `2^d ≤ n_coalitions`; otherwise
/// `n_coalitions − 2` coalitions are drawn in complementary pairs with sizes
/// distributed by the Shapley kernel. The empty and full coalitions enter as
/// equality constraints, so `Σφ = f(x) − f(mean)` holds to rounding.
pub fn kernel_shap<F, R>(f: &F, x: &[f64], background: &BackgroundSet, n_coalitions: usize, rng: &mut R) -> Result<ShapRow>
where
    F: Fn(&Matrix) -> Result<Vec<f64>> + ?Sized,
    R: Rng + ?Sized,
{
    kernel_shap_restricted(f, x, &background.mean(), None, n_coalitions, rng)
}

/// KernelSHAP over the players marked in `candidates` (all if `None`).
/// Players left out must be null players of the model; they receive 0.
/// Features equal to the reference are null under mean masking and are
/// dropped as well.
fn kernel_shap_restricted<F, R>(
    f: &F,
    x: &[f64],
    reference: &[f64],
    candidates: Option<&[bool]>,
    n_coalitions: usize,
    rng: &mut R,
) -> Result<ShapRow>
where
    F: Fn(&Matrix) -> Result<Vec<f64>> + ?Sized,
    R: Rng + ?Sized,
{
    check_widths(x, reference)?;
    let d = x.len();
    if n_coalitions < d + 2 {
        return Err(Error::Contract(format!(
            "KernelSHAP needs at least d + 2 = {} coalitions, got {n_coalitions}",
            d + 2
        )));
    }
    let players: Vec<usize> = (0..d)
        .filter(|&j| candidates.is_none_or(|c| c[j]) && x[j] != reference[j])
        .collect();
    let m = players.len();

    let coalitions: Vec<(Vec<bool>, f64)> = if m < 2 {
        Vec::new()
    } else if m < usize::BITS as usize - 1 && (1usize << m) <= n_coalitions {
        (1..(1usize << m) - 1)
            .map(|mask| {
                let z: Vec<bool> = (0..m).map(|k| mask >> k & 1 == 1).collect();
                let s = mask.count_ones() as usize;
                let w = (m - 1) as f64 / (binomial(m, s) * (s * (m - s)) as f64);
                (z, w)
            })
            .collect()
    } else {
        sample_coalitions(m, n_coalitions - 2, rng)
    };

    let mut rows = Matrix::zeros(2 + coalitions.len(), d);
    rows.row_mut(0).copy_from_slice(reference);
    rows.row_mut(1).copy_from_slice(x);
    for (r, (z, _)) in coalitions.iter().enumerate() {
        let row = rows.row_mut(r + 2);
        row.copy_from_slice(reference);
        for (k, &on) in z.iter().enumerate() {
            if on {
                row[players[k]] = x[players[k]];
            }
        }
    }
    let v = eval_batch(f, &rows)?;
    let (base, output) = (v[0], v[1]);
    let delta = output - base;

    let mut phi = vec![0.0; d];
    match m {
        0 => {}
        1 => phi[players[0]] = delta,
        _ => {
            let solved = constrained_wls(&coalitions, &v[2..], base, delta)?;
            for (k, &j) in players.iter().enumerate() {
                phi[j] = solved[k];
            }
        }
    }
    Ok(ShapRow { phi, base, output })
}

fn sample_coalitions<R: Rng + ?Sized>(m: usize, budget: usize, rng: &mut R) -> Vec<(Vec<bool>, f64)> {
    let size_weights: Vec<f64> = (1..m).map(|s| (m - 1) as f64 / (s * (m - s)) as f64).collect();
    let sizes = WeightedIndex::new(&size_weights).expect("kernel weights are positive");
    let pairs = (budget / 2).max(1);
    let mut out = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let s = sizes.sample(rng) + 1;
        let mut z = vec![false; m];
        for k in index::sample(rng, m, s) {
            z[k] = true;
        }
        let complement: Vec<bool> = z.iter().map(|b| !b).collect();
        out.push((z, 1.0));
        out.push((complement, 1.0));
    }
    out
}

/// Weighted least squares for `v(z) − base ≈ z·φ` subject to `Σφ = delta`,
/// solved by eliminating the last player.
fn constrained_wls(coalitions: &[(Vec<bool>, f64)], values: &[f64], base: f64, delta: f64) -> Result<Vec<f64>> {
    let m = coalitions[0].0.len();
    let p = m - 1;
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut aty = DVector::<f64>::zeros(p);
    let mut a = vec![0.0; p];
    for ((z, w), &v) in coalitions.iter().zip(values) {
        let last = f64::from(u8::from(z[p]));
        for k in 0..p {
            a[k] = f64::from(u8::from(z[k])) - last;
        }
        let y = v - base - last * delta;
        for i in 0..p {
            if a[i] == 0.0 {
                continue;
            }
            let wai = w * a[i];
            aty[i] += wai * y;
            for j in i..p {
                ata[(i, j)] += wai * a[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            ata[(i, j)] = ata[(j, i)];
        }
    }
    let chol = ata.clone().cholesky().filter(|ch| {
        let diag = ch.l_dirty().diagonal();
        diag.min() > COND_FLOOR * diag.max()
    });
    let solution = match chol {
        Some(ch) => ch.solve(&aty),
        None => {
            // too few distinct coalitions to pin every player down
            log::warn!("KernelSHAP system is rank deficient; using the minimum-norm solution");
            let scale = ata.amax().max(f64::MIN_POSITIVE);
            ata.svd(true, true)
                .solve(&aty, scale * PINV_RCOND)
                .map_err(|e| Error::NonFinite(format!("KernelSHAP system could not be solved: {e}")))?
        }
    };
    let mut phi: Vec<f64> = solution.iter().copied().collect();
    phi.push(delta - phi.iter().sum::<f64>());
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("KernelSHAP attributions".into()));
    }
    Ok(phi)
}

/// Runs KernelSHAP for every row of `x` in parallel. Sample `i` draws its
/// coalitions from a generator seeded with `i ^ seed`, so the result does not
/// depend on scheduling.
pub fn kernel_shap_rows<F>(
    f: &F,
    x: &Matrix,
    background: &BackgroundSet,
    candidates: Option<&[bool]>,
    n_coalitions: usize,
    seed: u64,
) -> Result<(Matrix, f64)>
where
    F: Fn(&Matrix) -> Result<Vec<f64>> + Sync + ?Sized,
{
    let reference = background.mean();
    let rows: Vec<ShapRow> = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64 ^ seed);
            kernel_shap_restricted(f, x.row(i), &reference, candidates, n_coalitions, &mut rng)
        })
        .collect::<Result<_>>()?;
    let base = match rows.first() {
        Some(r) => r.base,
        None => eval_batch(f, &Matrix::row_vector(&reference))?[0],
    };
    let mut values = Matrix::zeros(x.rows(), x.cols());
    for (i, r) in rows.into_iter().enumerate() {
        values.row_mut(i).copy_from_slice(&r.phi);
    }
    Ok((values, base))
}

/// Integrated Gradients by the midpoint rule:
/// `φ_j = (x_j − b_j) · mean_k ∂f/∂x_j(b + (k − ½)/steps · (x − b))`.
/// `grad` maps a batch of points to the gradients of the scalar output.
pub fn integrated_gradients<G>(grad: G, x: &[f64], baseline: &[f64], steps: usize) -> Result<Vec<f64>>
where
    G: FnOnce(&Matrix) -> Result<Matrix>,
{
    check_widths(x, baseline)?;
    if steps == 0 {
        return Err(Error::Contract("integrated gradients needs at least one step".into()));
    }
    let d = x.len();
    let points = Matrix::from_fn(steps, d, |k, j| {
        let t = (k as f64 + 0.5) / steps as f64;
        baseline[j] + t * (x[j] - baseline[j])
    });
    let g = grad(&points)?;
    if g.shape() != points.shape() {
        return Err(Error::Dimension {
            op: "integrated gradients",
            left: points.shape(),
            right: g.shape(),
        });
    }
    let avg = g.col_means();
    Ok((0..d).map(|j| (x[j] - baseline[j]) * avg[j]).collect())
}

/// Eval-mode gradient of `P(y = 1)` with respect to every input row.
pub fn label_input_gradients(params: &ModelParams, points: &Matrix) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut fp = net::build_forward(params, points, Mode::Eval, params.config.lambda, true, &mut rng)?;
    // rows are independent in eval mode, so the gradient of the sum is the
    // per-row gradient
    let total = fp.graph.sum(fp.label_prob);
    let mut grads = fp.graph.backward(total)?;
    grads
        .take(fp.input)
        .ok_or_else(|| Error::Contract("input gradient missing".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum VanillaMethod {
    KernelShap { n_coalitions: usize },
    IntegratedGradients { steps: usize },
}

/// Attributions of the label probability to the raw input features.
pub fn vanilla_explain(
    params: &ModelParams,
    x: &Matrix,
    feature_names: &[String],
    background: &BackgroundSet,
    method: VanillaMethod,
    seed: u64,
) -> Result<AttributionMatrix> {
    let f = |m: &Matrix| net::predict_label(params, m);
    let expected = mean(&eval_batch(&f, &background.rows)?);
    let (values, base_value, method) = match method {
        VanillaMethod::KernelShap { n_coalitions } => {
            let (values, base) = kernel_shap_rows(&f, x, background, None, n_coalitions, seed)?;
            (values, base, Method::KernelShap)
        }
        VanillaMethod::IntegratedGradients { steps } => {
            let baseline = vec![0.0; x.cols()];
            let rows: Vec<Vec<f64>> = (0..x.rows())
                .into_par_iter()
                .map(|i| integrated_gradients(|p| label_input_gradients(params, p), x.row(i), &baseline, steps))
                .collect::<Result<_>>()?;
            let base = eval_batch(&f, &Matrix::row_vector(&baseline))?[0];
            let values = Matrix::from_fn(x.rows(), x.cols(), |i, j| rows[i][j]);
            (values, base, Method::IntegratedGradients)
        }
    };
    Ok(AttributionMatrix {
        values,
        base_value,
        expected_value: expected,
        method,
        target: "label probability".into(),
        feature_names: feature_names.to_vec(),
    })
}

/// KernelSHAP attributions of one surrogate output on hidden activations.
/// Features no tree of that output splits on are null players and get 0.
pub fn surrogate_attributions(
    model: &SurrogateModel,
    output: usize,
    activations: &Matrix,
    background: &BackgroundSet,
    n_coalitions: usize,
    seed: u64,
) -> Result<AttributionMatrix> {
    if activations.cols() != model.n_features() || background.rows.cols() != model.n_features() {
        return Err(Error::Dimension {
            op: "surrogate attribution",
            left: activations.shape(),
            right: (background.rows.rows(), model.n_features()),
        });
    }
    if output >= model.n_outputs() {
        return Err(Error::Contract(format!(
            "surrogate has {} outputs, asked for #{output}",
            model.n_outputs()
        )));
    }
    let used = model.used_features(output);
    let f = |m: &Matrix| Ok(model.predict_output(output, m));
    let (values, base_value) = kernel_shap_rows(&f, activations, background, Some(&used), n_coalitions, seed)?;
    let expected_value = mean(&model.predict_output(output, &background.rows));
    Ok(AttributionMatrix {
        values,
        base_value,
        expected_value,
        method: Method::KernelShap,
        target: format!("surrogate probability of class {}", model.output_class(output)),
        feature_names: (0..model.n_features()).map(|j| format!("h{j}")).collect(),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// `−sign(s)·(exp(α·ln(1 + |s| + eps)/ln b) − 1)`, applied entrywise.
/// With α < 0 this keeps the sign of `s` and stretches mid-range magnitudes.
pub fn violin_value(s: f64, alpha: f64, base: f64, eps: f64) -> f64 {
    if s == 0.0 {
        return 0.0;
    }
    -s.signum() * ((alpha * (1.0 + s.abs() + eps).ln() / base.ln()).exp() - 1.0)
}

pub fn violin_transform(values: &Matrix, alpha: f64, base: f64, eps: f64) -> Result<Matrix> {
    if !(base > 1.0) || !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "violin transform needs base > 1 and eps > 0, got base {base}, eps {eps}"
        )));
    }
    Ok(values.map(|s| violin_value(s, alpha, base, eps)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bg(rows: &[&[f64]]) -> BackgroundSet {
        BackgroundSet::new(Matrix::from_rows(rows), "test").unwrap()
    }

    fn linear(c: Vec<f64>) -> impl Fn(&Matrix) -> Result<Vec<f64>> {
        move |m: &Matrix| Ok(m.iter_rows().map(|r| crate::tensor::dot(r, &c)).collect())
    }

    #[test]
    fn additive_model_attributions_are_closed_form() {
        let c = vec![2.0, -1.0, 0.5, 3.0, 0.0, -2.5];
        let f = linear(c.clone());
        let b = bg(&[&[1.0, 0.0, 2.0, 1.0, 1.0, 0.0], &[3.0, 2.0, 0.0, 0.0, 1.0, 4.0]]);
        let x = [4.0, 5.0, -1.0, 2.0, 7.0, 1.0];
        let mean = b.mean();
        let exact = exact_shapley(&f, &x, &b).unwrap();
        // 2^6 > 20, so coalitions are sampled
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kernel = kernel_shap(&f, &x, &b, 20, &mut rng).unwrap();
        for j in 0..6 {
            let want = c[j] * (x[j] - mean[j]);
            assert!((exact.phi[j] - want).abs() < 1e-12);
            assert!((kernel.phi[j] - want).abs() < 1e-9, "{j}: {} vs {want}", kernel.phi[j]);
        }
    }

    #[test]
    fn xor_interaction_splits_equally() {
        // v(∅)=0, v({0})=1, v({1})=1, v(N)=0: φ0 = ½(1−0) + ½(0−1) = 0
        let b = bg(&[&[0.0, 0.0]]);
        let xor = |m: &Matrix| Ok(m.iter_rows().map(|r| (r[0] - r[1]).abs()).collect());
        let r = exact_shapley(&xor, &[1.0, 1.0], &b).unwrap();
        assert_eq!(r.phi, vec![0.0, 0.0]);
        let r = exact_shapley(&xor, &[1.0, 0.5], &b).unwrap();
        // v(∅)=0, v({0})=1, v({1})=0.5, v(N)=0.5 → φ0 = ½(1−0) + ½(0.5−0.5) = 0.5, φ1 = 0
        assert!((r.phi[0] - 0.5).abs() < 1e-15 && r.phi[1].abs() < 1e-15);
    }

    #[test]
    fn symmetric_players_share_equally() {
        let f = |m: &Matrix| Ok(m.iter_rows().map(|r| (r[0] * r[1]).tanh() + r[2]).collect());
        let b = bg(&[&[0.0, 0.0, 0.0]]);
        let r = exact_shapley(&f, &[0.7, 0.7, 1.0], &b).unwrap();
        assert!((r.phi[0] - r.phi[1]).abs() < 1e-15);
        assert!((r.phi.iter().sum::<f64>() - (r.output - r.base)).abs() < 1e-12);
    }

    #[test]
    fn exact_rejects_too_many_features() {
        let f = linear(vec![1.0; 13]);
        let b = BackgroundSet::new(Matrix::zeros(1, 13), "zeros").unwrap();
        assert!(matches!(exact_shapley(&f, &[1.0; 13], &b), Err(Error::Contract(_))));
    }

    #[test]
    fn kernel_shap_needs_enough_coalitions() {
        let f = linear(vec![1.0; 4]);
        let b = BackgroundSet::new(Matrix::zeros(1, 4), "zeros").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(kernel_shap(&f, &[1.0; 4], &b, 5, &mut rng).is_err());
    }

    #[test]
    fn sampled_kernel_shap_keeps_completeness() {
        let f = |m: &Matrix| Ok(m.iter_rows().map(|r| r.iter().enumerate().map(|(j, v)| (v * (j as f64 + 1.0)).sin()).product::<f64>() + r[0] * r[3]).collect());
        let b = BackgroundSet::new(Matrix::from_fn(5, 16, |i, j| ((i * 7 + j) % 5) as f64 * 0.1), "grid").unwrap();
        let x: Vec<f64> = (0..16).map(|j| 0.3 + 0.05 * j as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = kernel_shap(&f, &x, &b, 64, &mut rng).unwrap();
        assert!((r.phi.iter().sum::<f64>() - (r.output - r.base)).abs() < 1e-10);
    }

    #[test]
    fn integrated_gradients_exact_for_linear() {
        let c = [1.5, -2.0, 0.25];
        let grad = |p: &Matrix| Ok(Matrix::from_fn(p.rows(), 3, |_, j| c[j]));
        let phi = integrated_gradients(grad, &[1.0, 2.0, 3.0], &[0.5, 0.0, -1.0], 1).unwrap();
        assert_eq!(phi, vec![0.75, -4.0, 1.0]);
        let phi = integrated_gradients(grad, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 8).unwrap();
        assert!(phi.iter().all(|&v| v == 0.0));
        assert!(integrated_gradients(grad, &[1.0], &[0.0], 0).is_err());
    }

    #[test]
    fn stratified_background_is_balanced() {
        let x = Matrix::from_fn(100, 2, |i, j| (i + j) as f64);
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 10 < 3)).collect();
        let pool: Vec<usize> = (0..100).collect();
        let b = BackgroundSet::stratified(&x, &labels, &pool, 50, 0).unwrap();
        assert_eq!(b.indices.len(), 50);
        assert_eq!(b.indices.iter().filter(|&&i| labels[i] == 1).count(), 25);
        let b = BackgroundSet::stratified(&x, &labels, &pool[..20], 50, 0).unwrap();
        assert_eq!(b.indices.len(), 20);
        let small: Vec<usize> = (0..40).collect();
        let b = BackgroundSet::stratified(&x, &labels, &small, 30, 0).unwrap();
        assert_eq!(b.indices.iter().filter(|&&i| labels[i] == 1).count(), 12);
        assert_eq!(b.indices.len(), 30);
    }

    #[test]
    fn violin_value_at_one() {
        let v = violin_value(1.0, VIOLIN_ALPHA, VIOLIN_BASE, VIOLIN_EPS);
        assert!((v - 0.452_3).abs() < 1e-4);
        assert_eq!(violin_value(0.0, VIOLIN_ALPHA, VIOLIN_BASE, VIOLIN_EPS), 0.0);
        assert!(violin_transform(&Matrix::zeros(1, 1), -2.0, 1.0, 1e-9).is_err());
        assert!(violin_transform(&Matrix::zeros(1, 1), -2.0, 10.0, 0.0).is_err());
    }
}
