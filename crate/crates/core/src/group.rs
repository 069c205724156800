//! Cyclic linear groups acting on filter matrices through their vectorisation.
//!
//! A [`GroupAction`] holds a generator `A` of size `nm x nm`. It acts on an
//! `n x m` filter by `X -> vec_inv(A vec(X))`, and a filter set is the orbit
//! `[W, φ(W), ..., φ^{p-1}(W)]` of a basis filter.

use lgn_tensor::{svd, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LgnError, Result};
use crate::linalg::lstsq;
use crate::vectorize::{vec, vec_inv};

/// Floor applied to singular values before taking logarithms.
pub const LOG_FLOOR: f64 = f64::EPSILON;

/// Which regulariser keeps the generators invertible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `mu * ||A Ã - I||_F` with a trained auxiliary inverse `Ã`.
    #[default]
    AuxInverse,
    /// `-mu * sum_i sigma_i(A)`.
    SvdSum,
    /// `-mu * log prod_i sigma_i(A)`.
    SvdLogdet,
}

impl LossVariant {
    pub fn default_mu(self) -> f64 {
        match self {
            LossVariant::AuxInverse => 0.001,
            LossVariant::SvdSum | LossVariant::SvdLogdet => 0.01,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::AuxInverse => "aux_inverse",
            LossVariant::SvdSum => "svd_sum",
            LossVariant::SvdLogdet => "svd_logdet",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = LgnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aux_inverse" => Ok(LossVariant::AuxInverse),
            "svd_sum" => Ok(LossVariant::SvdSum),
            "svd_logdet" => Ok(LossVariant::SvdLogdet),
            other => Err(LgnError::Config(format!(
                "unknown loss variant {other:?} (expected aux_inverse, svd_sum or svd_logdet)"
            ))),
        }
    }
}

/// Generator of a cyclic group of order `order` acting on `rows x cols` filters.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupAction {
    pub generator: Tensor,
    /// Trained approximation of the generator's inverse. Only used by the
    /// auxiliary-inverse regulariser.
    pub inverse_candidate: Tensor,
    pub order: usize,
    pub rows: usize,
    pub cols: usize,
}

/// The `order` filters generated from one basis filter.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterOrbit {
    pub basis: Tensor,
    pub expanded: Vec<Tensor>,
}

impl GroupAction {
    pub fn new(generator: Tensor, inverse_candidate: Tensor, order: usize, rows: usize, cols: usize) -> Result<Self> {
        let d = rows * cols;
        for (what, t) in [("generator", &generator), ("inverse candidate", &inverse_candidate)] {
            if t.shape() != [d, d] {
                return Err(LgnError::Extent {
                    what: "group action",
                    expected: format!("{what} of shape [{d}, {d}]"),
                    got: format!("{:?}", t.shape()),
                });
            }
        }
        if order == 0 {
            return Err(LgnError::Invalid("group order must be at least 1".into()));
        }
        Ok(GroupAction {
            generator,
            inverse_candidate,
            order,
            rows,
            cols,
        })
    }

    /// Generator and inverse candidate both equal to the identity.
    pub fn identity(order: usize, rows: usize, cols: usize) -> Result<Self> {
        let d = rows * cols;
        Self::new(Tensor::eye(d), Tensor::eye(d), order, rows, cols)
    }

    /// `A = I + scale * G` and, independently, `Ã = I + scale * G'`.
    pub fn near_identity<R: Rng + ?Sized>(order: usize, rows: usize, cols: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let d = rows * cols;
        let a = Tensor::eye(d).add(&Tensor::randn([d, d], rng).scale(scale))?;
        let at = Tensor::eye(d).add(&Tensor::randn([d, d], rng).scale(scale))?;
        Self::new(a, at, order, rows, cols)
    }

    /// Uses `generator` with the identity as inverse candidate.
    pub fn from_generator(generator: Tensor, order: usize, rows: usize, cols: usize) -> Result<Self> {
        let d = rows * cols;
        Self::new(generator, Tensor::eye(d), order, rows, cols)
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    fn check_filter(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [self.rows, self.cols] {
            return Err(LgnError::Extent {
                what: "group action",
                expected: format!("[{}, {}]", self.rows, self.cols),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// `vec_inv(A vec(X))`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check_filter(x)?;
        vec_inv(&self.generator.matvec(&vec(x)?)?, self.rows, self.cols)
    }

    /// Orbit of `basis` by repeated application of the action.
    pub fn expand_orbit(&self, basis: &Tensor) -> Result<FilterOrbit> {
        self.check_filter(basis)?;
        let mut expanded = Vec::with_capacity(self.order);
        expanded.push(basis.clone());
        for j in 1..self.order {
            let next = self.apply(&expanded[j - 1])?;
            expanded.push(next);
        }
        Ok(FilterOrbit {
            basis: basis.clone(),
            expanded,
        })
    }

    /// `A Ã - I`.
    fn inverse_residual(&self) -> Result<Tensor> {
        Ok(self.generator.matmul(&self.inverse_candidate)?.sub(&Tensor::eye(self.dim()))?)
    }

    /// `mu ||A Ã - I||_F`, or its square when `squared` is set.
    pub fn invertibility_loss(&self, mu: f64, squared: bool) -> Result<f64> {
        let r = self.inverse_residual()?.norm();
        Ok(mu * if squared { r * r } else { r })
    }

    /// `||A Ã - I||_F / sqrt(nm)`.
    pub fn normalized_inverse_residual(&self) -> Result<f64> {
        Ok(self.inverse_residual()?.norm() / (self.dim() as f64).sqrt())
    }

    /// Singular-value regulariser. The log form floors each value at
    /// [`LOG_FLOOR`] and warns, so the penalty stays finite.
    pub fn svd_invertibility_loss(&self, mu: f64, variant: LossVariant) -> Result<f64> {
        let values = svd(&self.generator)?.values;
        match variant {
            LossVariant::SvdSum => Ok(-mu * values.iter().sum::<f64>()),
            LossVariant::SvdLogdet => Ok(-mu * log_floored(&values).iter().sum::<f64>()),
            LossVariant::AuxInverse => Err(LgnError::Invalid(
                "svd_invertibility_loss needs an svd variant".into(),
            )),
        }
    }

    /// The selected regulariser for this group.
    pub fn regularizer(&self, mu: f64, variant: LossVariant, squared: bool) -> Result<f64> {
        match variant {
            LossVariant::AuxInverse => self.invertibility_loss(mu, squared),
            _ => self.svd_invertibility_loss(mu, variant),
        }
    }

    /// `||A^p - I||_F` from `p - 1` products.
    pub fn order_defect(&self) -> Result<f64> {
        let mut power = self.generator.clone();
        for _ in 1..self.order {
            power = power.matmul(&self.generator)?;
        }
        Ok(power.sub(&Tensor::eye(self.dim()))?.norm())
    }

    pub fn singular_values(&self) -> Result<Vec<f64>> {
        Ok(svd(&self.generator)?.values)
    }

    pub fn min_singular_value(&self) -> Result<f64> {
        Ok(self.singular_values()?.last().copied().unwrap_or(0.0))
    }
}

fn log_floored(values: &[f64]) -> Vec<f64> {
    if values.iter().any(|&s| s <= LOG_FLOOR) {
        log::warn!("singular value at or below {LOG_FLOOR:e}; log penalty clamped");
    }
    values.iter().map(|s| s.max(LOG_FLOOR).ln()).collect()
}

/// Recorded form of [`GroupAction::regularizer`] on generator `a` and
/// inverse candidate `a_tilde`.
pub fn regularizer_on_tape(
    tape: &mut Tape,
    a: Var,
    a_tilde: Var,
    mu: f64,
    variant: LossVariant,
    squared: bool,
) -> Result<Var> {
    match variant {
        LossVariant::AuxInverse => {
            let d = tape.shape(a)[0];
            let prod = tape.matmul(a, a_tilde)?;
            let eye = tape.constant(Tensor::eye(d));
            let r = tape.sub(prod, eye)?;
            let loss = if squared {
                let sq = tape.mul(r, r)?;
                tape.sum(sq)
            } else {
                tape.frobenius(r)?
            };
            Ok(tape.scale(loss, mu))
        }
        LossVariant::SvdSum => {
            let s = tape.singular_values(a)?;
            let total = tape.sum(s);
            Ok(tape.scale(total, -mu))
        }
        LossVariant::SvdLogdet => {
            let s = tape.singular_values(a)?;
            if tape.value(s).data().iter().any(|&v| v <= LOG_FLOOR) {
                log::warn!("singular value at or below {LOG_FLOOR:e}; log penalty clamped");
            }
            let clamped = tape.clamp_min(s, LOG_FLOOR);
            let logs = tape.log(clamped)?;
            let total = tape.sum(logs);
            Ok(tape.scale(total, -mu))
        }
    }
}

/// Matrix of a linear map on `n x m` matrices with respect to the vectorised
/// standard basis: column `j` is `vec(f(vec_inv(e_j)))`.
///
/// `f` is first checked for additivity and homogeneity on seeded random
/// probes; a relative residual above `1e-9` is rejected.
pub fn linear_map_to_matrix<F>(f: F, n: usize, m: usize) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    use rand::SeedableRng;
    const TOLERANCE: f64 = 1e-9;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x11ea_7a9e);
    for _ in 0..3 {
        let x = Tensor::randn([n, m], &mut rng);
        let y = Tensor::randn([n, m], &mut rng);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let combined = f(&x.scale(a).add(&y.scale(b))?)?;
        let separate = f(&x)?.scale(a).add(&f(&y)?.scale(b))?;
        let residual = combined.sub(&separate)?.norm() / combined.norm().max(separate.norm()).max(1.0);
        if !residual.is_finite() || residual > TOLERANCE {
            return Err(LgnError::NotLinear {
                residual,
                tolerance: TOLERANCE,
            });
        }
    }
    let d = n * m;
    let mut out = Tensor::zeros([d, d]);
    for j in 0..d {
        let mut e = Tensor::zeros([d]);
        e.set(&[j], 1.0);
        let image = vec(&f(&vec_inv(&e, n, m)?)?)?;
        if image.len() != d {
            return Err(LgnError::Extent {
                what: "linear_map_to_matrix",
                expected: format!("image of {d} entries"),
                got: format!("{:?}", image.shape()),
            });
        }
        for i in 0..d {
            out.set(&[i, j], image.data()[i]);
        }
    }
    Ok(out)
}

/// Exchanges the top-left and bottom-right entries.
pub fn corner_swap(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    let mut out = x.clone();
    out.set(&[0, 0], x.get(&[n - 1, m - 1]));
    out.set(&[n - 1, m - 1], x.get(&[0, 0]));
    Ok(out)
}

/// Counter-clockwise quarter turn of a square matrix as displayed:
/// `out[r][c] = in[c][n - 1 - r]`.
pub fn quarter_turn(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    if n != m {
        return Err(LgnError::Extent {
            what: "quarter_turn",
            expected: "a square matrix".into(),
            got: format!("{:?}", x.shape()),
        });
    }
    Ok(Tensor::from_fn2(n, n, |r, c| x.get(&[c, n - 1 - r])))
}

/// Best `n x n` matrix `M` in the least-squares sense with `M X_i ≈ Y_i`, and
/// the relative residual `||M X - Y||_F / ||Y||_F` over all samples.
pub fn best_left_multiplier(xs: &[Tensor], ys: &[Tensor]) -> Result<(Tensor, f64)> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(LgnError::Invalid("need matching, nonempty input and target lists".into()));
    }
    let (n, m) = xs[0].dims2()?;
    // M X = Y  <=>  X^T M^T = Y^T, one row per column of every sample
    let mut lhs = Vec::with_capacity(xs.len() * m * n);
    let mut rhs = Vec::with_capacity(xs.len() * m * n);
    for (x, y) in xs.iter().zip(ys) {
        let (xt, yt) = (x.transpose()?, y.transpose()?);
        lhs.extend_from_slice(xt.data());
        rhs.extend_from_slice(yt.data());
    }
    let rows = xs.len() * m;
    let design = Tensor::new([rows, n], lhs)?;
    let target = Tensor::new([rows, n], rhs)?;
    let fit = lstsq(&design, &target)?;
    let residual = design.matmul(&fit.solution)?.sub(&target)?.norm() / target.norm().max(f64::MIN_POSITIVE);
    Ok((fit.solution.transpose()?, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rotation_generator(n: usize) -> Tensor {
        linear_map_to_matrix(quarter_turn, n, n).unwrap()
    }

    #[test]
    fn identity_and_scaling_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([3, 4], &mut rng);
        let g = GroupAction::identity(4, 3, 4).unwrap();
        assert_eq!(g.apply(&x).unwrap(), x);
        let g2 = GroupAction::from_generator(Tensor::eye(12).scale(2.0), 2, 3, 4).unwrap();
        assert_eq!(g2.apply(&x).unwrap(), x.scale(2.0));
    }

    #[test]
    fn corner_swap_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = linear_map_to_matrix(corner_swap, 6, 6).unwrap();
        let g = GroupAction::from_generator(a, 2, 6, 6).unwrap();
        let x = Tensor::randn([6, 6], &mut rng);
        let y = g.apply(&x).unwrap();
        assert_eq!(y.get(&[0, 0]), x.get(&[5, 5]));
        assert_eq!(y.get(&[5, 5]), x.get(&[0, 0]));
        assert_eq!(corner_swap(&y).unwrap(), x);
    }

    #[test]
    fn small_lifted_matrices() {
        assert_eq!(linear_map_to_matrix(|x| Ok(x.clone()), 2, 3).unwrap(), Tensor::eye(6));
        let t = linear_map_to_matrix(|x| Ok(x.transpose()?), 2, 2).unwrap();
        let expected = Tensor::from_rows(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0],
        ]);
        assert_eq!(t, expected);
        let s = linear_map_to_matrix(corner_swap, 2, 2).unwrap();
        let expected = Tensor::from_rows(&[
            &[0.0, 0.0, 0.0, 1.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.0],
            &[1.0, 0.0, 0.0, 0.0],
        ]);
        assert_eq!(s, expected);
    }

    #[test]
    fn nonlinear_map_rejected() {
        let err = linear_map_to_matrix(|x| Ok(x.map(|v| v * v)), 2, 2).unwrap_err();
        assert!(matches!(err, LgnError::NotLinear { .. }));
        let err = linear_map_to_matrix(|x| Ok(x.map(|v| v + 1.0)), 2, 2).unwrap_err();
        assert!(matches!(err, LgnError::NotLinear { .. }));
    }

    #[test]
    fn orbit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn([6, 6], &mut rng);
        let one = GroupAction::near_identity(1, 6, 6, 0.01, &mut rng).unwrap();
        assert_eq!(one.expand_orbit(&w).unwrap().expanded, vec![w.clone()]);
        let id = GroupAction::identity(4, 6, 6).unwrap();
        assert_eq!(id.expand_orbit(&w).unwrap().expanded, vec![w.clone(); 4]);

        let rot = GroupAction::from_generator(rotation_generator(6), 4, 6, 6).unwrap();
        let orbit = rot.expand_orbit(&w).unwrap();
        assert_eq!(orbit.expanded[1], quarter_turn(&w).unwrap());
        assert_eq!(rot.apply(&orbit.expanded[3]).unwrap(), w);
        assert_eq!(rot.order_defect().unwrap(), 0.0);
    }

    #[test]
    fn orbit_is_repeated_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = GroupAction::near_identity(5, 3, 2, 0.3, &mut rng).unwrap();
        let w = Tensor::randn([3, 2], &mut rng);
        let orbit = g.expand_orbit(&w).unwrap();
        assert_eq!(orbit.expanded.len(), 5);
        assert_eq!(orbit.expanded[0], w);
        for j in 1..5 {
            assert_eq!(orbit.expanded[j], g.apply(&orbit.expanded[j - 1]).unwrap());
        }
    }

    #[test]
    fn invertibility_losses() {
        let g = GroupAction::identity(4, 2, 3).unwrap();
        assert_eq!(g.invertibility_loss(5.0, false).unwrap(), 0.0);
        let g = GroupAction::new(Tensor::eye(6).scale(2.0), Tensor::eye(6), 2, 2, 3).unwrap();
        assert!((g.invertibility_loss(1.0, false).unwrap() - 6f64.sqrt()).abs() < 1e-15);
        assert!((g.invertibility_loss(1.0, true).unwrap() - 6.0).abs() < 1e-14);
        assert!((g.order_defect().unwrap() - 3.0 * 6f64.sqrt()).abs() < 1e-14);

        let g = GroupAction::identity(4, 2, 3).unwrap();
        assert!((g.svd_invertibility_loss(1.0, LossVariant::SvdSum).unwrap() + 6.0).abs() < 1e-14);
        assert!(g.svd_invertibility_loss(1.0, LossVariant::SvdLogdet).unwrap().abs() < 1e-14);
        let g = GroupAction::from_generator(Tensor::diag(&[3.0, 1.0]), 2, 2, 1).unwrap();
        assert!((g.svd_invertibility_loss(1.0, LossVariant::SvdSum).unwrap() + 4.0).abs() < 1e-14);
    }

    #[test]
    fn singular_log_penalty_is_finite() {
        let g = GroupAction::from_generator(Tensor::diag(&[1.0, 0.0]), 2, 2, 1).unwrap();
        let loss = g.svd_invertibility_loss(1.0, LossVariant::SvdLogdet).unwrap();
        assert!(loss.is_finite());
        assert!(loss > 30.0);
    }

    #[test]
    fn tape_regularizers_match_direct_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = GroupAction::near_identity(4, 3, 3, 0.2, &mut rng).unwrap();
        for variant in [LossVariant::AuxInverse, LossVariant::SvdSum, LossVariant::SvdLogdet] {
            for squared in [false, true] {
                let mut tape = Tape::new();
                let a = tape.leaf(g.generator.clone());
                let at = tape.leaf(g.inverse_candidate.clone());
                let v = regularizer_on_tape(&mut tape, a, at, 0.3, variant, squared).unwrap();
                let direct = g.regularizer(0.3, variant, squared).unwrap();
                assert!((tape.value(v).item().unwrap() - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_swap_has_no_left_multiplier() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<Tensor> = (0..200).map(|_| Tensor::randn([6, 6], &mut rng)).collect();
        let ys: Vec<Tensor> = xs.iter().map(|x| corner_swap(x).unwrap()).collect();
        let (_, residual) = best_left_multiplier(&xs, &ys).unwrap();
        assert!(residual > 0.1, "residual {residual}");
        // a genuine left multiplication is recovered exactly
        let m = Tensor::randn([6, 6], &mut rng);
        let ys: Vec<Tensor> = xs.iter().map(|x| m.matmul(x).unwrap()).collect();
        let (fit, residual) = best_left_multiplier(&xs, &ys).unwrap();
        assert!(residual < 1e-10);
        assert!(fit.max_abs_diff(&m) < 1e-10);
    }

    #[test]
    fn loss_variant_parsing() {
        assert_eq!("svd_sum".parse::<LossVariant>().unwrap(), LossVariant::SvdSum);
        assert!("svd".parse::<LossVariant>().is_err());
        assert_eq!(LossVariant::SvdLogdet.default_mu(), 0.01);
    }
}
