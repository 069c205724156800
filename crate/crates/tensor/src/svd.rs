//! Singular value decomposition of square matrices by one-sided (Hestenes)
//! Jacobi rotations.
//!
//! Columns of a working copy of `A` are orthogonalised pairwise while the same
//! rotations accumulate into `V`. At convergence `A V = U S` with `U`
//! orthonormal on the nonzero singular values, and `V` holds eigenvectors of
//! `A^T A`.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 80;

/// Thin SVD with singular values sorted in nonincreasing order.
#[derive(Clone, Debug)]
pub struct Svd {
    /// Left singular vectors as columns. Columns for (numerically) zero
    /// singular values are left at zero.
    pub u: Tensor,
    pub values: Vec<f64>,
    /// Right singular vectors as columns.
    pub v: Tensor,
}

impl Svd {
    /// `sum_i u_i v_i^T`, the gradient of the sum of singular values.
    pub fn nuclear_subgradient(&self) -> Tensor {
        self.weighted_outer(&vec![1.0; self.values.len()])
    }

    /// `sum_i w_i u_i v_i^T`.
    pub fn weighted_outer(&self, weights: &[f64]) -> Tensor {
        let d = self.values.len();
        let (u, v) = (self.u.data(), self.v.data());
        Tensor::from_fn2(d, d, |r, c| {
            let mut acc = 0.0;
            for (i, w) in weights.iter().enumerate() {
                acc += w * u[r * d + i] * v[c * d + i];
            }
            acc
        })
    }
}

/// Computes the SVD of a square matrix.
pub fn svd(a: &Tensor) -> Result<Svd> {
    if !a.is_square() {
        return Err(invalid("svd", format!("expected a square matrix, got {:?}", a.shape())));
    }
    if !a.all_finite() {
        return Err(invalid("svd", "matrix has non-finite entries"));
    }
    let d = a.shape()[0];
    // column-major working copies
    let mut w: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| a.data()[i * d + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let (alpha, beta, gamma) = column_products(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    // stable sort keeps the rotation order for ties
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let largest = order.first().map_or(0.0, |&i| norms[i]);
    let tiny = largest * eps * d as f64;
    let mut u = Tensor::zeros([d, d]);
    let mut vt = Tensor::zeros([d, d]);
    let mut values = Vec::with_capacity(d);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        values.push(sigma);
        for i in 0..d {
            if sigma > tiny && sigma > 0.0 {
                u.set(&[i, k], w[j][i] / sigma);
            }
            vt.set(&[i, k], v[j][i]);
        }
    }
    Ok(Svd { u, values, v: vt })
}

/// Singular values only, nonincreasing.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    Ok(svd(a)?.values)
}

fn column_products(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mut a, mut b, mut g) = (0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        a += xi * xi;
        b += yi * yi;
        g += xi * yi;
    }
    (a, b, g)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*xp, *xq);
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_has_unit_values() {
        let s = svd(&Tensor::eye(5)).unwrap();
        assert!(s.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn diagonal_values_and_subgradient() {
        let s = svd(&Tensor::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(s.values, vec![3.0, 1.0]);
        assert!(s.nuclear_subgradient().max_abs_diff(&Tensor::eye(2)) < 1e-15);
        // sign and order of the diagonal do not matter
        let s = svd(&Tensor::diag(&[-1.0, 3.0])).unwrap();
        assert_eq!(s.values, vec![3.0, 1.0]);
        assert!(s.nuclear_subgradient().max_abs_diff(&Tensor::diag(&[-1.0, 1.0])) < 1e-15);
    }

    #[test]
    fn reconstructs_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn([12, 12], &mut rng);
        let s = svd(&a).unwrap();
        let us = Tensor::from_fn2(12, 12, |i, j| s.u.get(&[i, j]) * s.values[j]);
        let rebuilt = us.matmul(&s.v.transpose().unwrap()).unwrap();
        assert!(rebuilt.max_abs_diff(&a) < 1e-12);
        assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_deficient() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        let s = svd(&a).unwrap();
        assert!((s.values[0] - 5.0).abs() < 1e-14);
        assert!(s.values[1].abs() < 1e-14);
    }

    #[test]
    fn non_square_rejected() {
        assert!(svd(&Tensor::zeros([2, 3])).is_err());
    }
}
