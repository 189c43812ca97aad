//! Low-rank cosine similarity between models.
//!
//! A reduction map is fitted by PCA on a stack of flat models. Because the
//! stack holds far fewer models than each model has parameters, the
//! principal directions are recovered from the small `n x n` Gram matrix of
//! the centered stack instead of the `dim x dim` covariance.

use ndarray::Array2;

use crate::error::{shape_err, FedError, Result};
use crate::nn::ParamVector;

/// Norm below which a reduced vector is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Relative eigenvalue cutoff used to determine the numerical rank.
const RANK_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as columns.
pub fn symmetric_eigen(matrix: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = matrix.nrows();
    assert_eq!(n, matrix.ncols(), "matrix must be square");
    let mut a = matrix.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

/// Projection `M` (rows orthonormal) plus the centering offset.
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionMap {
    pub matrix: Array2<f64>,
    pub mean: Vec<f64>,
    pub created_round: u64,
}

impl ReductionMap {
    /// Number of retained components.
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// `M (v - mean)`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.mean.len() {
            return shape_err(format!(
                "model of length {} does not match map input {}",
                v.len(),
                self.mean.len()
            ));
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .matrix
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect())
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Fits the reduction map on `models` keeping at most `target_dim`
/// components. The effective dimension is additionally bounded by
/// `count - 1`, the model dimension and the numerical rank of the stack.
pub fn update_map(models: &[ParamVector], target_dim: usize, round: u64) -> Result<ReductionMap> {
    if models.len() < 2 {
        return Err(FedError::InsufficientData(format!(
            "a reduction map needs at least 2 models, got {}",
            models.len()
        )));
    }
    if target_dim == 0 {
        return Err(FedError::Config("reduction dimension must be at least 1".into()));
    }
    let dim = models[0].len();
    if let Some(bad) = models.iter().find(|m| m.len() != dim) {
        return shape_err(format!("stack mixes lengths {} and {}", dim, bad.len()));
    }
    let n = models.len();
    let mut mean = vec![0.0; dim];
    for m in models {
        mean.iter_mut().zip(m.as_slice()).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let centered: Vec<Vec<f64>> = models
        .iter()
        .map(|m| m.as_slice().iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();

    let mut gram = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let g: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[[i, j]] = g;
            gram[[j, i]] = g;
        }
    }
    let (values, vectors) = symmetric_eigen(&gram);
    let top = values.first().copied().unwrap_or(0.0);
    let limit = target_dim.min(n - 1).min(dim);
    let rank = values
        .iter()
        .take(limit)
        .take_while(|&&l| top > 0.0 && l > RANK_TOL * top)
        .count();

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(rank);
    for k in 0..rank {
        // u_k = X^T v_k / sqrt(lambda_k)
        let mut u = vec![0.0; dim];
        for (i, row) in centered.iter().enumerate() {
            let w = vectors[[i, k]];
            u.iter_mut().zip(row).for_each(|(a, b)| *a += w * b);
        }
        // two Gram-Schmidt passes against earlier rows
        for _ in 0..2 {
            for prev in &rows {
                let dot: f64 = u.iter().zip(prev).map(|(a, b)| a * b).sum();
                u.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        if normalize(&mut u) == 0.0 {
            break;
        }
        // sign: largest-magnitude entry positive
        let pivot = u
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > u[best].abs() { i } else { best });
        if u[pivot] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        rows.push(u);
    }
    if rows.is_empty() {
        log::warn!("reduction map at round {round} is empty: all models coincide");
    }
    let d = rows.len();
    let matrix = Array2::from_shape_vec((d, dim), rows.concat()).expect("rows have model length");
    Ok(ReductionMap {
        matrix,
        mean,
        created_round: round,
    })
}

/// Cosine of two reduced vectors; `None` when either is degenerate.
pub fn reduced_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Low-rank cosine similarity together with a degeneracy flag.
pub fn lrcos_flagged(a: &ParamVector, b: &ParamVector, map: &ReductionMap) -> Result<(f64, bool)> {
    let pa = map.project(a.as_slice())?;
    let pb = map.project(b.as_slice())?;
    Ok(match reduced_cosine(&pa, &pb) {
        Some(c) => (c, false),
        None => {
            log::debug!("degenerate reduced vector in lrcos");
            (0.0, true)
        }
    })
}

/// Cosine similarity of `M (a - mean)` and `M (b - mean)`; 0 when either
/// reduced vector vanishes.
pub fn lrcos(a: &ParamVector, b: &ParamVector, map: &ReductionMap) -> Result<f64> {
    lrcos_flagged(a, b, map).map(|(c, _)| c)
}

/// `sum_i (a_i - b_i)^2`.
pub fn l2_distance_squared(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err(format!("vectors of length {} and {}", a.len(), b.len()));
    }
    Ok(sq_dist(a, b))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Rows are clients, columns are the compared models (usually centers).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub round: u64,
}

/// Every row of `rows` against every entry of `cols`, projecting each
/// model once.
pub fn similarity_matrix(
    rows: &[ParamVector],
    cols: &[ParamVector],
    map: &ReductionMap,
    round: u64,
) -> Result<SimilarityMatrix> {
    let pr: Vec<Vec<f64>> = rows
        .iter()
        .map(|m| map.project(m.as_slice()))
        .collect::<Result<_>>()?;
    let pc: Vec<Vec<f64>> = cols
        .iter()
        .map(|m| map.project(m.as_slice()))
        .collect::<Result<_>>()?;
    let values = Array2::from_shape_fn((rows.len(), cols.len()), |(i, k)| {
        reduced_cosine(&pr[i], &pc[k]).unwrap_or(0.0)
    });
    Ok(SimilarityMatrix { values, round })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn pv(v: Vec<f64>) -> ParamVector {
        ParamVector::new(v, 0).unwrap()
    }

    fn random_stack(n: usize, dim: usize, seed: u64) -> Vec<ParamVector> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| pv((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let mut rng = seeded(4);
        let n = 7;
        let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let a = b.t().dot(&b);
        let (vals, vecs) = symmetric_eigen(&a);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let recon = vecs
            .dot(&Array2::from_diag(&ndarray::Array1::from(vals)))
            .dot(&vecs.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn rows_are_orthonormal() {
        for seed in 0..5 {
            let map = update_map(&random_stack(12, 30, seed), 8, 0).unwrap();
            assert_eq!(map.dim(), 8);
            let gram = map.matrix.dot(&map.matrix.t());
            for ((i, j), v) in gram.indexed_iter() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-8);
            }
            for row in map.matrix.rows() {
                let pivot = row
                    .iter()
                    .fold(0.0f64, |m, &x| if x.abs() > m.abs() { x } else { m });
                assert!(pivot > 0.0);
            }
        }
    }

    #[test]
    fn dimension_is_clamped_to_count_minus_one() {
        let map = update_map(&random_stack(5, 40, 1), 50, 3).unwrap();
        assert_eq!(map.dim(), 4);
        assert_eq!(map.created_round, 3);
    }

    #[test]
    fn collinear_stack_is_rank_one_and_isometric() {
        let v: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let models: Vec<ParamVector> = [-2.0, -0.5, 0.3, 1.0, 4.0]
            .iter()
            .map(|c| pv(v.iter().zip(&b).map(|(x, y)| c * x + y).collect()))
            .collect();
        let map = update_map(&models, 3, 0).unwrap();
        assert_eq!(map.dim(), 1);
        for a in &models {
            for c in &models {
                let orig = l2_distance_squared(a.as_slice(), c.as_slice()).unwrap().sqrt();
                let pa = map.project(a.as_slice()).unwrap();
                let pc = map.project(c.as_slice()).unwrap();
                assert!((orig - sq_dist(&pa, &pc).sqrt()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn too_few_models() {
        assert!(matches!(
            update_map(&random_stack(1, 4, 0), 2, 0),
            Err(FedError::InsufficientData(_))
        ));
    }

    #[test]
    fn lrcos_examples() {
        let map = ReductionMap {
            matrix: Array2::eye(2),
            mean: vec![0.0, 0.0],
            created_round: 0,
        };
        let a = pv(vec![1.0, 1.0]);
        let b = pv(vec![1.0, 0.0]);
        assert!((lrcos(&a, &a, &map).unwrap() - 1.0).abs() < 1e-12);
        assert!((lrcos(&a, &b, &map).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(lrcos(&b, &pv(vec![0.0, 3.0]), &map).unwrap().abs() < 1e-15);
        let (value, degenerate) = lrcos_flagged(&a, &pv(vec![0.0, 0.0]), &map).unwrap();
        assert_eq!((value, degenerate), (0.0, true));
        assert!(lrcos(&a, &pv(vec![1.0]), &map).is_err());
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_distance_squared(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((l2_distance_squared(&[1.1], &[5.0]).unwrap() - 15.21).abs() < 1e-12);
        assert!(l2_distance_squared(&[1.0], &[1.0, 2.0]).is_err());
    }
}
