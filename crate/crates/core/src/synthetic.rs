//! Recovering a linear patch transform `y = A x` from example pairs, by Adam
//! on the mean squared error and by ordinary least squares.

use lgn_tensor::{AdamConfig, AdamState, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::data::PairSet;
use crate::error::{LgnError, Result};
use crate::linalg::lstsq;

/// A fitted operator with its training error and, once compared, its
/// distance from a reference operator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFit {
    pub operator: Tensor,
    /// Mean squared error per target entry on the training pairs.
    pub train_mse: f64,
    /// Loss before each epoch and after the last one (gradient fits only).
    pub history: Vec<f64>,
    pub rank_deficient: bool,
}

/// Distances between a fitted and a reference operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OperatorError {
    pub max_abs: f64,
    pub relative_frobenius: f64,
}

impl OperatorError {
    pub fn between(fitted: &Tensor, reference: &Tensor) -> Result<Self> {
        let diff = fitted.sub(reference)?;
        Ok(OperatorError {
            max_abs: diff.max_abs(),
            relative_frobenius: diff.norm() / reference.norm().max(f64::MIN_POSITIVE),
        })
    }
}

/// Gradient-descent settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig { epochs: 200, lr: 0.01 }
    }
}

/// Mean squared error per entry of `targets - inputs A^T`.
pub fn pair_mse(op: &Tensor, pairs: &PairSet) -> Result<f64> {
    let pred = pairs.inputs.matmul(&op.transpose()?)?;
    let r = pred.sub(&pairs.targets)?;
    Ok(r.dot(&r)? / r.len().max(1) as f64)
}

/// Sufficient statistics of the quadratic objective.
struct Moments {
    gram: Tensor,
    cross_t: Tensor,
    target_energy: f64,
    count: f64,
}

impl Moments {
    fn new(pairs: &PairSet) -> Result<Self> {
        let xt = pairs.inputs.transpose()?;
        Ok(Moments {
            gram: xt.matmul(&pairs.inputs)?,
            cross_t: pairs.targets.transpose()?.matmul(&pairs.inputs)?,
            target_energy: pairs.targets.dot(&pairs.targets)?,
            count: pairs.targets.len() as f64,
        })
    }

    /// Loss and gradient of `||Y - X A^T||^2 / (N d)` through `X^T X` and `Y^T X`.
    fn loss_and_grad(&self, a: &Tensor) -> Result<(f64, Tensor)> {
        let ag = a.matmul(&self.gram)?;
        let quad = ag.dot(a)?;
        let cross = self.cross_t.dot(a)?;
        let loss = (self.target_energy - 2.0 * cross + quad) / self.count;
        let grad = ag.sub(&self.cross_t)?.scale(2.0 / self.count);
        Ok((loss, grad))
    }
}

/// Fits `A` by full-batch Adam from a uniform `±1/sqrt(d)` initialisation.
pub fn fit_action_gd<R: Rng + ?Sized>(pairs: &PairSet, cfg: GdConfig, rng: &mut R) -> Result<SyntheticFit> {
    let d = pairs.inputs.shape()[1];
    if pairs.len() < d {
        log::warn!("only {} pairs for a {d}x{d} operator; the fit is underdetermined", pairs.len());
    }
    let bound = 1.0 / (d as f64).sqrt();
    let mut params = vec![Tensor::rand_uniform([d, d], -bound, bound, rng)];
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &params);
    let moments = Moments::new(pairs)?;
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, grad) = moments.loss_and_grad(&params[0])?;
        if !loss.is_finite() {
            return Err(LgnError::Diverged(format!(
                "loss became {loss} at epoch {epoch}; try a learning rate below {}",
                cfg.lr
            )));
        }
        history.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        adam.step(&mut params, &[grad])?;
    }
    let operator = params.pop().expect("one parameter");
    Ok(SyntheticFit {
        train_mse: pair_mse(&operator, pairs)?,
        operator,
        history,
        rank_deficient: false,
    })
}

/// Exact minimiser of the mean squared error, from the normal equations.
pub fn fit_action_lstsq(pairs: &PairSet) -> Result<SyntheticFit> {
    let sol = lstsq(&pairs.inputs, &pairs.targets)?;
    let operator = sol.solution.transpose()?;
    Ok(SyntheticFit {
        train_mse: pair_mse(&operator, pairs)?,
        operator,
        history: Vec::new(),
        rank_deficient: sol.rank_deficient,
    })
}
