//! Column-major vectorisation between `n x m` matrices and `n*m` vectors.
//!
//! `vec` stacks columns: `[X11, ..., Xn1, X12, ..., Xn2, ..., X1m, ..., Xnm]`.
//! [`vec_inv`] reshapes directly; [`vec_inv_kronecker`] evaluates the
//! Kronecker-product form `(vec(I_m)^T (x) I_n)(I_m (x) a)` and exists as the
//! reference that the direct reshape must reproduce bit-for-bit.

use lgn_tensor::Tensor;

use crate::error::{LgnError, Result};

fn matrix_dims(x: &Tensor) -> Result<(usize, usize)> {
    x.dims2().map_err(|_| LgnError::Extent {
        what: "vec",
        expected: "a matrix".into(),
        got: format!("{:?}", x.shape()),
    })
}

/// Column-major vectorisation of a matrix.
pub fn vec(x: &Tensor) -> Result<Tensor> {
    let (n, m) = matrix_dims(x)?;
    let mut out = vec![0.0; n * m];
    for j in 0..m {
        for i in 0..n {
            out[j * n + i] = x.get(&[i, j]);
        }
    }
    Ok(Tensor::new([n * m], out)?)
}

/// Inverse of [`vec`] for an `n x m` target.
pub fn vec_inv(a: &Tensor, n: usize, m: usize) -> Result<Tensor> {
    if a.shape() != [n * m] {
        return Err(LgnError::Extent {
            what: "vec_inv",
            expected: format!("[{}]", n * m),
            got: format!("{:?}", a.shape()),
        });
    }
    let d = a.data();
    Ok(Tensor::from_fn2(n, m, |i, j| d[j * n + i]))
}

/// Kronecker product of two matrices.
pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    Ok(Tensor::from_fn2(ar * br, ac * bc, |i, j| {
        a.get(&[i / br, j / bc]) * b.get(&[i % br, j % bc])
    }))
}

/// `vec^{-1}` through its Kronecker-product definition.
pub fn vec_inv_kronecker(a: &Tensor, n: usize, m: usize) -> Result<Tensor> {
    if a.shape() != [n * m] {
        return Err(LgnError::Extent {
            what: "vec_inv_kronecker",
            expected: format!("[{}]", n * m),
            got: format!("{:?}", a.shape()),
        });
    }
    let vec_im = vec(&Tensor::eye(m))?.reshape([1, m * m])?;
    let left = kron(&vec_im, &Tensor::eye(n))?;
    let column = a.clone().reshape([n * m, 1])?;
    let right = kron(&Tensor::eye(m), &column)?;
    Ok(left.matmul(&right)?)
}

/// `sum_i e_i (x) X e_i`, the Kronecker form of [`vec`].
pub fn vec_kronecker(x: &Tensor) -> Result<Tensor> {
    let (n, m) = matrix_dims(x)?;
    let mut acc = Tensor::zeros([n * m, 1]);
    for i in 0..m {
        let mut e = Tensor::zeros([m, 1]);
        e.set(&[i, 0], 1.0);
        let col = x.matmul(&e)?;
        acc = acc.add(&kron(&e, &col)?)?;
    }
    Ok(acc.reshape([n * m])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn column_major_order() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(vec(&x).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(vec(&Tensor::eye(2)).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        let back = vec_inv(&Tensor::new([4], vec![1.0, 3.0, 2.0, 4.0]).unwrap(), 2, 2).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            vec_inv(&Tensor::zeros([5]), 2, 3),
            Err(LgnError::Extent { .. })
        ));
    }

    #[test]
    fn roundtrip_and_kronecker_forms_agree_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let (n, m) = (1 + trial % 5, 1 + (trial / 5) % 6);
            let x = Tensor::randn([n, m], &mut rng);
            let v = vec(&x).unwrap();
            assert_eq!(vec_inv(&v, n, m).unwrap(), x);
            assert_eq!(vec_kronecker(&x).unwrap(), v);
            let a = Tensor::randn([n * m], &mut rng);
            assert_eq!(vec_inv(&a, n, m).unwrap(), vec_inv_kronecker(&a, n, m).unwrap());
        }
    }

    #[test]
    fn vec_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn([3, 4], &mut rng);
        let y = Tensor::randn([3, 4], &mut rng);
        let (a, b) = (0.75, -2.5);
        let lhs = vec(&x.scale(a).add(&y.scale(b)).unwrap()).unwrap();
        let rhs = vec(&x).unwrap().scale(a).add(&vec(&y).unwrap().scale(b)).unwrap();
        assert_eq!(lhs, rhs);
    }
}
