//! Structure measurements for learned generators: the identity probe, DFT
//! conjugation with its off-diagonal energy, circulant reconstruction, and
//! skew/Toeplitz/quadrant scores.

use lgn_tensor::Tensor;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{LgnError, Result};
use crate::group::GroupAction;

/// Dense complex matrix in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        ComplexMatrix { rows, cols, data }
    }

    pub fn from_real(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        Ok(ComplexMatrix::from_fn(r, c, |i, j| Complex64::new(t.get(&[i, j]), 0.0)))
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.cols + j]
    }

    pub fn matmul(&self, other: &ComplexMatrix) -> Result<ComplexMatrix> {
        if self.cols != other.rows {
            return Err(LgnError::Extent {
                what: "complex matmul",
                expected: format!("{} rows", self.cols),
                got: format!("{} rows", other.rows),
            });
        }
        let mut out = ComplexMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.get(i, p);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(p, j);
                }
            }
        }
        Ok(out)
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn re(&self) -> Tensor {
        Tensor::from_fn2(self.rows, self.cols, |i, j| self.get(i, j).re)
    }

    pub fn abs(&self) -> Tensor {
        Tensor::from_fn2(self.rows, self.cols, |i, j| self.get(i, j).norm())
    }

    pub fn max_abs_diff(&self, other: &ComplexMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Unitary DFT matrix `F[j, k] = exp(-2πi jk / n) / sqrt(n)`.
pub fn dft_matrix(n: usize) -> ComplexMatrix {
    let scale = 1.0 / (n as f64).sqrt();
    ComplexMatrix::from_fn(n, n, |j, k| {
        let angle = -2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
        Complex64::from_polar(scale, angle)
    })
}

/// `F A F^{-1}` with the unitary DFT, so `F^{-1} = F^H`.
pub fn dft_conjugate(a: &Tensor) -> Result<ComplexMatrix> {
    let square = a.is_square();
    if !square {
        return Err(LgnError::Extent {
            what: "dft_conjugate",
            expected: "a square matrix".into(),
            got: format!("{:?}", a.shape()),
        });
    }
    let f = dft_matrix(a.shape()[0]);
    f.matmul(&ComplexMatrix::from_real(a)?)?.matmul(&f.adjoint())
}

/// Same conjugation for a complex matrix.
pub fn dft_conjugate_complex(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    let f = dft_matrix(a.rows);
    f.matmul(a)?.matmul(&f.adjoint())
}

/// `F^{-1} diag(d) F`, a circulant matrix. It is real when `d` is conjugate
/// symmetric (`d[k] = conj(d[n - k])`).
pub fn circulant_from_diagonal(d: &[Complex64]) -> ComplexMatrix {
    let n = d.len();
    let f = dft_matrix(n);
    let fi = f.adjoint();
    ComplexMatrix::from_fn(n, n, |i, j| (0..n).map(|k| fi.get(i, k) * d[k] * f.get(k, j)).sum())
}

/// Real part of [`circulant_from_diagonal`].
pub fn real_circulant_from_diagonal(d: &[Complex64]) -> Tensor {
    circulant_from_diagonal(d).re()
}

/// Share of the squared magnitude that lies off the diagonal. An all-zero
/// matrix yields 0 with a warning.
pub fn offdiag_energy(m: &ComplexMatrix) -> Result<f64> {
    if m.rows != m.cols {
        return Err(LgnError::Extent {
            what: "offdiag_energy",
            expected: "a square matrix".into(),
            got: format!("{}x{}", m.rows, m.cols),
        });
    }
    let (mut total, mut off) = (0.0, 0.0);
    for i in 0..m.rows {
        for j in 0..m.cols {
            let e = m.get(i, j).norm_sqr();
            total += e;
            if i != j {
                off += e;
            }
        }
    }
    if total == 0.0 {
        log::warn!("offdiag_energy of an all-zero matrix taken as 0");
        return Ok(0.0);
    }
    Ok(off / total)
}

fn nonzero_square(a: &Tensor, what: &'static str) -> Result<usize> {
    if !a.is_square() {
        return Err(LgnError::Extent {
            what,
            expected: "a square matrix".into(),
            got: format!("{:?}", a.shape()),
        });
    }
    if a.norm() == 0.0 {
        return Err(LgnError::Invalid(format!("{what}: matrix is zero")));
    }
    Ok(a.shape()[0])
}

/// `||(A - A^T) / 2||_F / ||A||_F`.
pub fn skew_score(a: &Tensor) -> Result<f64> {
    nonzero_square(a, "skew_score")?;
    Ok(a.sub(&a.transpose()?)?.scale(0.5).norm() / a.norm())
}

/// Orthogonal projection onto Toeplitz matrices: each diagonal replaced by its mean.
pub fn toeplitz_projection(a: &Tensor) -> Result<Tensor> {
    let n = nonzero_square(a, "toeplitz_projection")?;
    let mut means = vec![0.0; 2 * n - 1];
    for i in 0..n {
        for j in 0..n {
            means[j + n - 1 - i] += a.get(&[i, j]);
        }
    }
    for (k, m) in means.iter_mut().enumerate() {
        let offset = k as isize - (n as isize - 1);
        *m /= (n - offset.unsigned_abs()) as f64;
    }
    Ok(Tensor::from_fn2(n, n, |i, j| means[j + n - 1 - i]))
}

/// `||P_T(A)||_F / ||A||_F` with `P_T` the Toeplitz projection.
pub fn toeplitz_score(a: &Tensor) -> Result<f64> {
    Ok(toeplitz_projection(a)?.norm() / a.norm())
}

/// Mean sign of the entries of each block of a 2x2 split, row-major
/// (top-left, top-right, bottom-left, bottom-right).
pub fn quadrant_signs(a: &Tensor) -> Result<[f64; 4]> {
    let n = nonzero_square(a, "quadrant_signs")?;
    let h = n / 2;
    let mut out = [0.0; 4];
    for (q, o) in out.iter_mut().enumerate() {
        let (r0, c0) = ((q / 2) * h, (q % 2) * h);
        let (r1, c1) = (if q / 2 == 0 { h } else { n }, if q % 2 == 0 { h } else { n });
        let mut acc = 0.0;
        for i in r0..r1 {
            for j in c0..c1 {
                acc += a.get(&[i, j]).signum() * f64::from(a.get(&[i, j]) != 0.0);
            }
        }
        *o = acc / ((r1 - r0) * (c1 - c0)).max(1) as f64;
    }
    Ok(out)
}

/// `φ_A(I_n)`, the action applied to the identity filter.
pub fn identity_probe(g: &GroupAction) -> Result<Tensor> {
    if g.rows != g.cols {
        return Err(LgnError::Extent {
            what: "identity_probe",
            expected: "square filters".into(),
            got: format!("{}x{}", g.rows, g.cols),
        });
    }
    g.apply(&Tensor::eye(g.rows))
}

/// Every measurement of one group action.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StructureReport {
    pub skew: f64,
    pub toeplitz: f64,
    pub dft_offdiag_energy: f64,
    pub quadrant_signs: [f64; 4],
    pub order_defect: f64,
    pub inverse_residual: f64,
    pub min_singular_value: f64,
    #[serde(skip)]
    pub identity_probe: Tensor,
}

impl StructureReport {
    pub fn of(g: &GroupAction) -> Result<Self> {
        let a = &g.generator;
        Ok(StructureReport {
            skew: skew_score(a)?,
            toeplitz: toeplitz_score(a)?,
            dft_offdiag_energy: offdiag_energy(&dft_conjugate(a)?)?,
            quadrant_signs: quadrant_signs(a)?,
            order_defect: g.order_defect()?,
            inverse_residual: g.normalized_inverse_residual()?,
            min_singular_value: g.min_singular_value()?,
            identity_probe: identity_probe(g)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{linear_map_to_matrix, quarter_turn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn shift(n: usize) -> Tensor {
        Tensor::from_fn2(n, n, |l, k| if l == (k + 1) % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn dft_basics() {
        assert_eq!(dft_matrix(1).data, vec![Complex64::new(1.0, 0.0)]);
        for n in [2, 5, 36] {
            let f = dft_matrix(n);
            let id = ComplexMatrix::from_real(&Tensor::eye(n)).unwrap();
            assert!(f.matmul(&f.adjoint()).unwrap().max_abs_diff(&id) < 1e-12);
        }
    }

    #[test]
    fn shift_is_diagonalised_by_roots_of_unity() {
        for n in [3, 6, 36] {
            let d = dft_conjugate(&shift(n)).unwrap();
            assert!(offdiag_energy(&d).unwrap() < 1e-20);
            for j in 0..n {
                let root = Complex64::from_polar(1.0, -2.0 * PI * j as f64 / n as f64);
                assert!((d.get(j, j) - root).norm() < 1e-10);
                for k in 0..n {
                    if k != j {
                        assert!(d.get(j, k).norm() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn circulants_from_diagonals() {
        let ones = vec![Complex64::new(1.0, 0.0); 6];
        assert!(real_circulant_from_diagonal(&ones).max_abs_diff(&Tensor::eye(6)) < 1e-12);
        let roots: Vec<Complex64> = (0..6).map(|j| Complex64::from_polar(1.0, -2.0 * PI * j as f64 / 6.0)).collect();
        let c = circulant_from_diagonal(&roots);
        assert!(c.re().max_abs_diff(&shift(6)) < 1e-12);
        assert!(c.data.iter().all(|z| z.im.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Vec<Complex64> = (0..8)
            .map(|_| Complex64::new(rand::Rng::random_range(&mut rng, -1.0..1.0), rand::Rng::random_range(&mut rng, -1.0..1.0)))
            .collect();
        let back = dft_conjugate_complex(&circulant_from_diagonal(&d)).unwrap();
        let diag = ComplexMatrix::from_fn(8, 8, |i, j| if i == j { d[i] } else { Complex64::new(0.0, 0.0) });
        assert!(back.max_abs_diff(&diag) < 1e-10);
    }

    #[test]
    fn offdiag_extremes() {
        let diag = ComplexMatrix::from_real(&Tensor::diag(&[1.0, -2.0, 3.0])).unwrap();
        assert_eq!(offdiag_energy(&diag).unwrap(), 0.0);
        let hollow = ComplexMatrix::from_real(&Tensor::from_rows(&[&[0.0, 1.0], &[2.0, 0.0]])).unwrap();
        assert_eq!(offdiag_energy(&hollow).unwrap(), 1.0);
        assert_eq!(offdiag_energy(&ComplexMatrix::zeros(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Tensor::randn([8, 8], &mut rng);
        let skew = g.sub(&g.transpose().unwrap()).unwrap();
        let sym = g.add(&g.transpose().unwrap()).unwrap();
        assert!((skew_score(&skew).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(skew_score(&sym).unwrap(), 0.0);
        let toeplitz = Tensor::from_fn2(8, 8, |i, j| (j as f64 - i as f64).sin());
        assert!((toeplitz_score(&toeplitz).unwrap() - 1.0).abs() < 1e-14);
        assert!(toeplitz_score(&g).unwrap() < 1.0);
        assert!(skew_score(&Tensor::zeros([3, 3])).is_err());
        for c in [0.5, 3.0, 1e4] {
            assert!((skew_score(&g.scale(c)).unwrap() - skew_score(&g).unwrap()).abs() < 1e-14);
            assert!((toeplitz_score(&g.scale(c)).unwrap() - toeplitz_score(&g).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn toeplitz_projection_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn([7, 7], &mut rng);
        let p = toeplitz_projection(&a).unwrap();
        assert!(toeplitz_projection(&p).unwrap().max_abs_diff(&p) < 1e-14);
        // the residual is orthogonal to every Toeplitz matrix, in particular to p
        assert!(a.sub(&p).unwrap().dot(&p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn quadrants() {
        let a = Tensor::from_fn2(4, 4, |i, j| if (i < 2) == (j < 2) { 1.0 } else { -2.0 });
        assert_eq!(quadrant_signs(&a).unwrap(), [1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn probes() {
        let id = GroupAction::identity(4, 6, 6).unwrap();
        assert_eq!(identity_probe(&id).unwrap(), Tensor::eye(6));
        let two = GroupAction::from_generator(Tensor::eye(36).scale(2.0), 4, 6, 6).unwrap();
        assert_eq!(identity_probe(&two).unwrap(), Tensor::eye(6).scale(2.0));
        let rot = GroupAction::from_generator(linear_map_to_matrix(quarter_turn, 6, 6).unwrap(), 4, 6, 6).unwrap();
        let anti = Tensor::from_fn2(6, 6, |i, j| if i + j == 5 { 1.0 } else { 0.0 });
        assert_eq!(identity_probe(&rot).unwrap(), anti);
        let report = StructureReport::of(&id).unwrap();
        assert_eq!(report.skew, 0.0);
        assert_eq!(report.order_defect, 0.0);
    }
}
