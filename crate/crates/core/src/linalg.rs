//! Dense least squares through nalgebra.

use lgn_tensor::Tensor;
use nalgebra::DMatrix;

use crate::error::{LgnError, Result};

/// Solution of `min_B ||X B - Y||_F` for row-stacked samples.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    /// `[d_in, d_out]`.
    pub solution: Tensor,
    /// Set when `X^T X` was not positive definite and the minimum-norm
    /// solution from a pseudo-inverse was returned instead.
    pub rank_deficient: bool,
}

pub(crate) fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (r, c) = t.dims2()?;
    Ok(DMatrix::from_row_slice(r, c, t.data()))
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn2(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Solves the normal equations `X^T X B = X^T Y` by Cholesky, falling back to
/// an SVD pseudo-inverse of `X` when the Gram matrix is numerically singular.
pub fn lstsq(x: &Tensor, y: &Tensor) -> Result<LeastSquares> {
    let (xm, ym) = (to_dmatrix(x)?, to_dmatrix(y)?);
    if xm.nrows() != ym.nrows() {
        return Err(LgnError::Extent {
            what: "lstsq",
            expected: format!("{} rows", xm.nrows()),
            got: format!("{} rows", ym.nrows()),
        });
    }
    let gram = xm.transpose() * &xm;
    let rhs = xm.transpose() * &ym;
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    if let Some(chol) = gram.clone().cholesky() {
        let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
        if min_pivot > scale * 1e-12 {
            return Ok(LeastSquares {
                solution: from_dmatrix(&chol.solve(&rhs)),
                rank_deficient: false,
            });
        }
    }
    log::warn!("lstsq: design matrix is rank deficient, returning the minimum-norm solution");
    let svd = xm.svd(true, true);
    let sol = svd
        .solve(&ym, 1e-12 * svd.singular_values.max())
        .map_err(|e| LgnError::Invalid(format!("lstsq: {e}")))?;
    Ok(LeastSquares {
        solution: from_dmatrix(&sol),
        rank_deficient: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_exact_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([50, 6], &mut rng);
        let b = Tensor::randn([6, 3], &mut rng);
        let y = x.matmul(&b).unwrap();
        let fit = lstsq(&x, &y).unwrap();
        assert!(!fit.rank_deficient);
        assert!(fit.solution.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn duplicate_columns_flagged() {
        let x = Tensor::from_rows(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        let y = Tensor::from_rows(&[&[2.0], &[4.0], &[6.0]]);
        let fit = lstsq(&x, &y).unwrap();
        assert!(fit.rank_deficient);
        // minimum-norm solution splits the weight evenly
        assert!(fit.solution.max_abs_diff(&Tensor::from_rows(&[&[1.0], &[1.0]])) < 1e-10);
    }
}
