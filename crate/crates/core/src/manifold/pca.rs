use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// n × k projections of the centred data.
    pub scores: Matrix,
    /// k × d orthonormal rows, strongest first.
    pub components: Matrix,
    /// Variance along each component (divisor n − 1).
    pub explained_variance: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Principal components via the SVD of the column-centred data. Each
/// component's sign is fixed so that its largest-magnitude entry is positive.
pub fn pca(x: &Matrix, k: usize) -> Result<Pca> {
    let (n, d) = x.shape();
    if k == 0 || k > n.min(d) {
        return Err(Error::Contract(format!(
            "pca needs 1 <= k <= min(n, d) = {}, got {k}",
            n.min(d)
        )));
    }
    let mean = x.col_means();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::NonFinite("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

    let mut components = Matrix::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    let denom = (n.max(2) - 1) as f64;
    for (c, &src) in order.iter().take(k).enumerate() {
        let row: Vec<f64> = (0..d).map(|j| v_t[(src, j)]).collect();
        let pivot = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in row.into_iter().enumerate() {
            components[(c, j)] = sign * v;
        }
        let s = svd.singular_values[src];
        explained_variance.push(s * s / denom);
    }
    let centred = Matrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let scores = centred.matmul_t(&components)?;
    Ok(Pca {
        scores,
        components,
        explained_variance,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn low_rank_data_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let basis = Matrix::from_fn(2, 6, |_, _| rng.random_range(-1.0..1.0));
        let coeff = Matrix::from_fn(30, 2, |_, _| rng.random_range(-3.0..3.0));
        let x = coeff.matmul(&basis).unwrap();
        let p = pca(&x, 2).unwrap();
        let back = p.scores.matmul(&p.components).unwrap();
        for i in 0..30 {
            for j in 0..6 {
                assert!((back[(i, j)] + p.mean[j] - x[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn scores_are_uncorrelated_and_variance_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::from_fn(40, 5, |_, j| rng.random_range(-1.0..1.0) * (j + 1) as f64);
        let p = pca(&x, 4).unwrap();
        let cov = p.scores.t_matmul(&p.scores).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    assert!(cov[(a, b)].abs() < 1e-8);
                }
            }
        }
        assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        assert!(pca(&x, 6).is_err());
        assert!(pca(&x, 0).is_err());
    }
}
