use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{euclidean, sq_euclidean, Matrix};

/// Score returned when all within-cluster scatter vanishes.
pub const CALINSKI_HARABASZ_CAP: f64 = 1e12;

/// Maps arbitrary ids to `0..C` in order of first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let ids = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

fn check_labels(x: &Matrix, labels: &[usize], op: &'static str) -> Result<(Vec<usize>, usize)> {
    if labels.len() != x.rows() {
        return Err(Error::Dimension {
            op,
            left: x.shape(),
            right: (labels.len(), 1),
        });
    }
    let (ids, c) = compact(labels);
    if c < 2 {
        return Err(Error::Contract(format!("{op} needs at least two clusters, found {c}")));
    }
    Ok((ids, c))
}

/// Mean silhouette `(b − a)/max(a, b)`; members of singleton clusters score 0.
pub fn silhouette(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let (ids, c) = check_labels(x, labels, "silhouette")?;
    let n = x.rows();
    let mut sizes = vec![0usize; c];
    for &k in &ids {
        sizes[k] += 1;
    }
    let per_sample: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = ids[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; c];
            for j in 0..n {
                if j != i {
                    sums[ids[j]] += euclidean(x.row(i), x.row(j));
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..c)
                .filter(|&k| k != own)
                .map(|k| sums[k] / sizes[k] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(per_sample.iter().sum::<f64>() / n as f64)
}

/// `[tr(B)/(C−1)] / [tr(W)/(n−C)]`, capped at [`CALINSKI_HARABASZ_CAP`].
pub fn calinski_harabasz(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let (ids, c) = check_labels(x, labels, "calinski_harabasz")?;
    let n = x.rows();
    if c >= n {
        return Err(Error::Contract(format!(
            "calinski_harabasz needs fewer clusters ({c}) than samples ({n})"
        )));
    }
    let d = x.cols();
    let mean = x.col_means();
    let mut centroids = vec![vec![0.0; d]; c];
    let mut sizes = vec![0usize; c];
    for (i, &k) in ids.iter().enumerate() {
        sizes[k] += 1;
        for (s, v) in centroids[k].iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    for (cen, &m) in centroids.iter_mut().zip(&sizes) {
        cen.iter_mut().for_each(|v| *v /= m as f64);
    }
    let between: f64 = centroids
        .iter()
        .zip(&sizes)
        .map(|(cen, &m)| m as f64 * sq_euclidean(cen, &mean))
        .sum();
    let within: f64 = ids
        .iter()
        .enumerate()
        .map(|(i, &k)| sq_euclidean(x.row(i), &centroids[k]))
        .sum();
    if within == 0.0 {
        return Ok(CALINSKI_HARABASZ_CAP);
    }
    let score = (between / (c - 1) as f64) / (within / (n - c) as f64);
    Ok(score.min(CALINSKI_HARABASZ_CAP))
}

/// `(v − min)/(max − min)`; a constant series maps to 0.5 everywhere.
pub fn minmax_normalize(series: &[f64]) -> Vec<f64> {
    let (lo, hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi > lo {
        series.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; series.len()]
    }
}

/// Locally weighted linear regression with tricube weights over the
/// `⌈frac·n⌉` nearest x-neighbours of each point. No robustness iterations.
pub fn lowess(x: &[f64], y: &[f64], frac: f64) -> Result<Vec<f64>> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Dimension {
            op: "lowess",
            left: (n, 1),
            right: (y.len(), 1),
        });
    }
    if n < 3 {
        return Err(Error::Contract(format!("lowess needs at least 3 points, got {n}")));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Contract(format!("lowess frac must lie in (0, 1], got {frac}")));
    }
    let r = ((frac * n as f64).ceil() as usize).clamp(2, n);
    Ok((0..n)
        .map(|i| {
            let mut near: Vec<(f64, usize)> = (0..n).map(|j| ((x[j] - x[i]).abs(), j)).collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(r);
            let dmax = near.last().map_or(0.0, |e| e.0);
            let w: Vec<(f64, usize)> = near
                .iter()
                .map(|&(d, j)| {
                    let wt = if dmax > 0.0 { (1.0 - (d / dmax).powi(3)).powi(3) } else { 1.0 };
                    (wt, j)
                })
                .collect();
            let sw: f64 = w.iter().map(|e| e.0).sum();
            let xbar = w.iter().map(|&(wt, j)| wt * x[j]).sum::<f64>() / sw;
            let ybar = w.iter().map(|&(wt, j)| wt * y[j]).sum::<f64>() / sw;
            let sxx: f64 = w.iter().map(|&(wt, j)| wt * (x[j] - xbar).powi(2)).sum();
            let sxy: f64 = w.iter().map(|&(wt, j)| wt * (x[j] - xbar) * (y[j] - ybar)).sum();
            if sxx > 1e-12 * sw * (1.0 + xbar * xbar) {
                ybar + sxy / sxx * (x[i] - xbar)
            } else {
                ybar
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_four_points_by_hand() {
        // clusters {0, 1} and {4, 6} on a line
        let x = Matrix::from_rows(&[[0.0], [1.0], [4.0], [6.0]]);
        let s = silhouette(&x, &[0, 0, 1, 1]).unwrap();
        // a = 1, 1, 2, 2; b = 5, 4, 3.5, 5.5
        let want = ((5.0 - 1.0) / 5.0 + (4.0 - 1.0) / 4.0 + (3.5 - 2.0) / 3.5 + (5.5 - 2.0) / 5.5) / 4.0;
        assert!((s - want).abs() < 1e-15);
    }

    #[test]
    fn silhouette_edge_cases() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [10.0]]);
        // the singleton scores 0
        let s = silhouette(&x, &[0, 0, 1]).unwrap();
        let want = ((10.0 - 1.0) / 10.0 + (9.0 - 1.0) / 9.0) / 3.0;
        assert!((s - want).abs() < 1e-15);
        assert!(silhouette(&x, &[2, 2, 2]).is_err());
    }

    #[test]
    fn calinski_harabasz_six_points_by_hand() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0], [1.0, 3.0], [10.0, 0.0], [12.0, 0.0], [11.0, 3.0]]);
        // centroids (1, 1), (11, 1); grand mean (6, 1)
        // B = 3·25 + 3·25 = 150; W = 8 per cluster (2 + 2 + 4)
        let ch = calinski_harabasz(&x, &[0, 0, 0, 1, 1, 1]).unwrap();
        let want = (150.0 / 1.0) / (16.0 / 4.0);
        assert!((ch - want).abs() < 1e-12, "{ch}");
    }

    #[test]
    fn calinski_harabasz_degenerate_and_contracts() {
        let x = Matrix::from_rows(&[[0.0], [0.0], [5.0], [5.0]]);
        assert_eq!(calinski_harabasz(&x, &[0, 0, 1, 1]).unwrap(), CALINSKI_HARABASZ_CAP);
        assert!(calinski_harabasz(&x, &[0, 1, 2, 3]).is_err());
        assert!(calinski_harabasz(&x, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[1.0, 3.0, 5.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[2.0, 2.0]), vec![0.5, 0.5]);
        assert_eq!(minmax_normalize(&[0.0, 0.25, 1.0]), vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn lowess_reproduces_lines_and_constants() {
        let x: Vec<f64> = (0..15).map(|i| (i as f64).powf(1.3)).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        for frac in [0.2, 0.3, 0.7, 1.0] {
            let s = lowess(&x, &y, frac).unwrap();
            for (a, b) in s.iter().zip(&y) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let c = lowess(&x, &[3.0; 15], 0.3).unwrap();
        assert!(c.iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(lowess(&x[..2], &y[..2], 0.5).is_err());
        assert!(lowess(&x, &y, 0.0).is_err());
    }
}
