//! A compact UMAP: fuzzy k-nearest-neighbour graph plus a sampled
//! cross-entropy layout, started from the first two principal components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pca::pca;
use crate::error::{Error, Result};
use crate::tensor::{euclidean, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UmapConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub negative_sample_rate: usize,
    pub seed: u64,
}

impl Default for UmapConfig {
    fn default() -> Self {
        UmapConfig {
            n_neighbors: 30,
            min_dist: 0.3,
            spread: 1.0,
            epochs: 200,
            learning_rate: 1.0,
            negative_sample_rate: 5,
            seed: 0,
        }
    }
}

/// `min(k, n/4)`, never below 2.
pub fn scaled_neighbors(k: usize, n: usize) -> usize {
    k.min(n / 4).max(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding2D {
    pub coords: Matrix,
    pub config: UmapConfig,
}

/// Exact k nearest neighbours of every row (self excluded), ordered by
/// distance then index.
pub fn nearest_neighbors(x: &Matrix, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = x.rows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, euclidean(x.row(i), x.row(j))))
                .collect();
            let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
            if k < d.len() {
                d.select_nth_unstable_by(k, cmp);
                d.truncate(k);
            }
            d.sort_by(cmp);
            d
        })
        .collect()
}

/// ρ (nearest non-zero distance) and σ with `Σ exp(−(d−ρ)/σ) = log₂ k`.
fn smooth_knn(dists: &[f64], k: usize, mean_all: f64) -> (f64, f64) {
    let rho = dists.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
    let target = (k as f64).log2();
    let (mut lo, mut hi, mut sigma) = (0.0, f64::INFINITY, 1.0);
    for _ in 0..64 {
        let psum: f64 = dists.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).sum();
        if (psum - target).abs() < 1e-5 {
            break;
        }
        if psum > target {
            hi = sigma;
            sigma = (lo + hi) / 2.0;
        } else {
            lo = sigma;
            sigma = if hi.is_infinite() { sigma * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    let local_mean = dists.iter().sum::<f64>() / dists.len().max(1) as f64;
    let floor = 1e-3 * if rho > 0.0 { local_mean } else { mean_all };
    (rho, sigma.max(floor))
}

/// Symmetric fuzzy membership strengths as a sorted edge list `(i, j, w)`
/// with both directions present.
pub fn fuzzy_graph(x: &Matrix, k: usize) -> Vec<(usize, usize, f64)> {
    let knn = nearest_neighbors(x, k);
    let mean_all = knn.iter().flatten().map(|e| e.1).sum::<f64>() / (x.rows() * k).max(1) as f64;
    let mut directed: Vec<(usize, usize, f64)> = Vec::with_capacity(x.rows() * k);
    for (i, nbrs) in knn.iter().enumerate() {
        let dists: Vec<f64> = nbrs.iter().map(|e| e.1).collect();
        let (rho, sigma) = smooth_knn(&dists, k, mean_all);
        for &(j, d) in nbrs {
            let w = (-(d - rho).max(0.0) / sigma).exp();
            // underflowed memberships carry no attraction
            if w > 0.0 {
                directed.push((i, j, w));
            }
        }
    }
    directed.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let lookup = |i: usize, j: usize| -> f64 {
        directed
            .binary_search_by(|e| (e.0, e.1).cmp(&(i, j)))
            .map_or(0.0, |p| directed[p].2)
    };
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * directed.len());
    for &(i, j, w) in &directed {
        let back = lookup(j, i);
        let u = w + back - w * back;
        edges.push((i, j, u));
        if back == 0.0 {
            edges.push((j, i, u));
        }
    }
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    edges.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    edges
}

/// Fits `1/(1 + a·x^{2b})` to the offset-exponential target curve by
/// Levenberg-Marquardt over 300 points on `[0, 3·spread]`.
pub fn fit_ab(min_dist: f64, spread: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b, mut mu) = (1.0, 1.0, 1e-3);
    let mut cost = sse(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let den = 1.0 + a * p;
            let r = 1.0 / den - y;
            let ja = -p / (den * den);
            let jb = -a * p * 2.0 * x.ln() / (den * den);
            jtj[0][0] += ja * ja;
            jtj[0][1] += ja * jb;
            jtj[1][1] += jb * jb;
            jtr[0] += ja * r;
            jtr[1] += jb * r;
        }
        let m00 = jtj[0][0] * (1.0 + mu);
        let m11 = jtj[1][1] * (1.0 + mu);
        let det = m00 * m11 - jtj[0][1] * jtj[0][1];
        if det.abs() < 1e-300 {
            break;
        }
        let da = -(m11 * jtr[0] - jtj[0][1] * jtr[1]) / det;
        let db = -(m00 * jtr[1] - jtj[0][1] * jtr[0]) / det;
        let (na, nb) = (a + da, b + db);
        let new_cost = if na > 0.0 && nb > 0.0 { sse(na, nb) } else { f64::INFINITY };
        if new_cost < cost {
            let converged = (cost - new_cost) < 1e-15 * cost.max(1e-300);
            a = na;
            b = nb;
            cost = new_cost;
            mu *= 0.3;
            if converged {
                break;
            }
        } else {
            mu *= 10.0;
            if mu > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

fn initial_layout(x: &Matrix, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let n = x.rows();
    let k = x.cols().min(n).min(2);
    let scores = pca(x, k)?.scores;
    let jitter = Normal::new(0.0, 1e-4).expect("valid sd");
    let mut out = Matrix::zeros(n, 2);
    for c in 0..2 {
        let col: Vec<f64> = if c < k { scores.column(c) } else { vec![0.0; n] };
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let range = hi - lo;
        for i in 0..n {
            let v = if range > 0.0 { 10.0 * (col[i] - lo) / range } else { 5.0 };
            out[(i, c)] = v + jitter.sample(rng);
        }
    }
    Ok(out)
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

/// Two-dimensional embedding of the rows of `x`.
pub fn embed_2d(x: &Matrix, cfg: &UmapConfig) -> Result<Embedding2D> {
    let n = x.rows();
    if cfg.n_neighbors < 2 {
        return Err(Error::Contract(format!("n_neighbors must be at least 2, got {}", cfg.n_neighbors)));
    }
    if n <= cfg.n_neighbors {
        return Err(Error::Contract(format!(
            "embedding needs more rows ({n}) than n_neighbors ({})",
            cfg.n_neighbors
        )));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("embedding input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let edges = fuzzy_graph(x, cfg.n_neighbors);
    let (a, b) = fit_ab(cfg.min_dist, cfg.spread);
    let mut y = initial_layout(x, &mut rng)?;

    let epochs = cfg.epochs.max(1);
    let w_max = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let kept: Vec<(usize, usize, f64)> = edges
        .into_iter()
        .filter(|e| e.2 >= w_max / epochs as f64)
        .map(|(i, j, w)| (i, j, w_max / w))
        .collect();
    let neg_rate = cfg.negative_sample_rate as f64;
    let mut next_sample: Vec<f64> = kept.iter().map(|e| e.2).collect();
    let mut next_negative: Vec<f64> = kept.iter().map(|e| e.2 / neg_rate.max(1e-12)).collect();

    for epoch in 0..epochs {
        let alpha = cfg.learning_rate * (1.0 - epoch as f64 / epochs as f64);
        let e = epoch as f64;
        for (k, &(i, j, eps)) in kept.iter().enumerate() {
            if next_sample[k] > e {
                continue;
            }
            let (dx, dy) = (y[(i, 0)] - y[(j, 0)], y[(i, 1)] - y[(j, 1)]);
            let d2 = dx * dx + dy * dy;
            if d2 > 0.0 {
                let coeff = -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b));
                let (gx, gy) = (clip(coeff * dx) * alpha, clip(coeff * dy) * alpha);
                y[(i, 0)] += gx;
                y[(i, 1)] += gy;
                y[(j, 0)] -= gx;
                y[(j, 1)] -= gy;
            }
            next_sample[k] += eps;

            if cfg.negative_sample_rate > 0 {
                let eps_neg = eps / neg_rate;
                let n_neg = ((e - next_negative[k]) / eps_neg).floor().max(0.0) as usize;
                for _ in 0..n_neg {
                    let t = rng.random_range(0..n);
                    if t == i {
                        continue;
                    }
                    let (dx, dy) = (y[(i, 0)] - y[(t, 0)], y[(i, 1)] - y[(t, 1)]);
                    let d2 = dx * dx + dy * dy;
                    let (gx, gy) = if d2 > 0.0 {
                        let coeff = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)));
                        (clip(coeff * dx), clip(coeff * dy))
                    } else {
                        (4.0, 4.0)
                    };
                    y[(i, 0)] += gx * alpha;
                    y[(i, 1)] += gy * alpha;
                }
                next_negative[k] += n_neg as f64 * eps_neg;
            }
        }
    }
    if !y.all_finite() {
        return Err(Error::NonFinite("embedding layout".into()));
    }
    Ok(Embedding2D {
        coords: y,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ab_matches_reference_curve_fit() {
        // reference values from a least-squares fit of the same curve
        let (a, b) = fit_ab(0.1, 1.0);
        assert!((a - 1.577).abs() < 5e-3 && (b - 0.895).abs() < 5e-3, "{a} {b}");
    }

    #[test]
    fn sigma_hits_log2_k() {
        let d = [0.5, 0.7, 1.0, 1.1, 2.0];
        let (rho, sigma) = smooth_knn(&d, 5, 1.0);
        assert_eq!(rho, 0.5);
        let s: f64 = d.iter().map(|&x| (-(x - rho) / sigma).exp()).sum();
        assert!((s - 5f64.log2()).abs() < 1e-4);
    }

    #[test]
    fn fuzzy_graph_is_symmetric_and_bounded() {
        let x = Matrix::from_fn(20, 3, |i, j| ((i * 13 + j * 7) % 11) as f64);
        let g = fuzzy_graph(&x, 4);
        for &(i, j, w) in &g {
            assert!(w > 0.0 && w <= 1.0 && i != j);
            assert!(g.iter().any(|&(a, c, v)| a == j && c == i && v == w));
        }
    }

    #[test]
    fn small_n_is_rejected() {
        let x = Matrix::zeros(5, 2);
        let cfg = UmapConfig {
            n_neighbors: 5,
            ..UmapConfig::default()
        };
        assert!(embed_2d(&x, &cfg).is_err());
        let cfg = UmapConfig {
            n_neighbors: 1,
            ..UmapConfig::default()
        };
        assert!(embed_2d(&x, &cfg).is_err());
    }

    #[test]
    fn neighbor_scaling() {
        assert_eq!(scaled_neighbors(30, 1200), 30);
        assert_eq!(scaled_neighbors(400, 1200), 300);
        assert_eq!(scaled_neighbors(30, 4), 2);
    }
}
