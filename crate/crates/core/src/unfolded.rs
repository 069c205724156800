//! Unrolled ISTA networks whose filter banks are orbits of learned groups.
//!
//! One layer computes `z' = S_λ(z + α Wᵀ(x - W z))`, where `W z` is the
//! synthesis map [`lgn_tensor::conv::conv2d_adjoint`] and `Wᵀ y` the analysis
//! map [`lgn_tensor::conv::conv2d_same`]. Every layer reads the original
//! input `x`. The bank `W` stacks, for each of the `K` groups, the orbit of
//! that group's basis filter, so output channel `k * p + j` holds
//! `φ_k^j(basis_k)`.

use lgn_tensor::{BatchStats, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LgnError, Result};
use crate::group::{regularizer_on_tape, GroupAction, LossVariant};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    Reconstruction,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Reconstruction => "reconstruction",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = LgnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "reconstruction" => Ok(Task::Reconstruction),
            other => Err(LgnError::Config(format!(
                "unknown task {other:?} (expected classification or reconstruction)"
            ))),
        }
    }
}

/// Shape and hyperparameters of an [`UnfoldedNetwork`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub layers: usize,
    pub groups: usize,
    pub order: usize,
    pub filter_rows: usize,
    pub filter_cols: usize,
    pub channels: usize,
    pub step: f64,
    pub one_sided: bool,
    /// Share one set of filters and thresholds across all layers.
    pub tied: bool,
    pub task: Task,
    pub classes: usize,
    /// Side of the average-pooled grid in front of the classifier.
    pub pool: usize,
    /// Scale of the Gaussian perturbation of the identity at initialisation.
    pub init_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            layers: 4,
            groups: 5,
            order: 4,
            filter_rows: 6,
            filter_cols: 6,
            channels: 1,
            step: 0.01,
            one_sided: true,
            tied: false,
            task: Task::Classification,
            classes: 10,
            pool: 4,
            init_scale: 0.01,
        }
    }
}

impl NetworkConfig {
    /// Channels of every code: `K * p`.
    pub fn code_channels(&self) -> usize {
        self.groups * self.order
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("layers", self.layers),
            ("groups", self.groups),
            ("order", self.order),
            ("filter_rows", self.filter_rows),
            ("filter_cols", self.filter_cols),
            ("channels", self.channels),
            ("classes", self.classes),
            ("pool", self.pool),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            problems.push(format!("step size must be positive, got {}", self.step));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            problems.push(format!("init_scale must be nonnegative, got {}", self.init_scale));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LgnError::Config(problems.join("; ")))
        }
    }
}

/// `K` groups with their basis filters, per-filter thresholds and step size.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupConvLayer {
    pub groups: Vec<GroupAction>,
    /// One `[C, n, m]` basis per group.
    pub bases: Vec<Tensor>,
    /// `[K * p]`, kept nonnegative.
    pub thresholds: Tensor,
    pub step: f64,
    pub one_sided: bool,
}

impl GroupConvLayer {
    pub fn new<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let (n, m, c) = (cfg.filter_rows, cfg.filter_cols, cfg.channels);
        let bound = 1.0 / ((c * n * m) as f64).sqrt();
        let mut groups = Vec::with_capacity(cfg.groups);
        let mut bases = Vec::with_capacity(cfg.groups);
        for _ in 0..cfg.groups {
            groups.push(GroupAction::near_identity(cfg.order, n, m, cfg.init_scale, rng)?);
            bases.push(Tensor::rand_uniform([c, n, m], -bound, bound, rng));
        }
        Ok(GroupConvLayer {
            groups,
            bases,
            thresholds: Tensor::zeros([cfg.code_channels()]),
            step: cfg.step,
            one_sided: cfg.one_sided,
        })
    }

    pub fn code_channels(&self) -> usize {
        self.groups.iter().map(|g| g.order).sum()
    }

    /// `[K p, C, n, m]` bank from [`GroupAction::expand_orbit`] on every
    /// channel slice of every basis.
    pub fn expanded_bank(&self) -> Result<Tensor> {
        let mut filters = Vec::new();
        for (g, basis) in self.groups.iter().zip(&self.bases) {
            let c = basis.shape()[0];
            let orbits = (0..c)
                .map(|ch| g.expand_orbit(&basis.index0(ch)?))
                .collect::<Result<Vec<_>>>()?;
            for j in 0..g.order {
                let slices: Vec<Tensor> = orbits.iter().map(|o| o.expanded[j].clone()).collect();
                filters.push(Tensor::stack(&slices)?);
            }
        }
        Ok(Tensor::stack(&filters)?)
    }

    /// Sets negative thresholds to zero.
    pub fn clamp_thresholds(&mut self) {
        for v in self.thresholds.data_mut() {
            *v = v.max(0.0);
        }
    }
}

/// Records the group-expanded bank `[K p, C, n, m]` of one layer.
pub fn bank_on_tape(
    tape: &mut Tape,
    generators: &[Var],
    bases: &[Var],
    order: usize,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(generators.len() * order);
    for (&a, &basis) in generators.iter().zip(bases) {
        let mut current = tape.vec_columns(basis)?;
        parts.push(current);
        for _ in 1..order {
            current = tape.matmul(a, current)?;
            parts.push(current);
        }
    }
    Ok(tape.assemble_bank(&parts, rows, cols)?)
}

/// One recorded ISTA iteration. `z_prev = None` stands for the zero code.
pub fn ista_step_on_tape(
    tape: &mut Tape,
    bank: Var,
    thresholds: Var,
    x: Var,
    z_prev: Option<Var>,
    step: f64,
    one_sided: bool,
) -> Result<Var> {
    if !(step > 0.0) {
        return Err(LgnError::Invalid(format!("ISTA step size must be positive, got {step}")));
    }
    let pre = match z_prev {
        None => {
            let corr = tape.conv2d(x, bank)?;
            tape.scale(corr, step)
        }
        Some(z) => {
            let synth = tape.conv2d_adjoint(z, bank)?;
            if tape.shape(synth) != tape.shape(x) {
                return Err(LgnError::Extent {
                    what: "ista step",
                    expected: format!("{:?}", tape.shape(x)),
                    got: format!("{:?}", tape.shape(synth)),
                });
            }
            let resid = tape.sub(x, synth)?;
            let corr = tape.conv2d(resid, bank)?;
            let scaled = tape.scale(corr, step);
            tape.add(z, scaled)?
        }
    };
    Ok(tape.soft_threshold(pre, thresholds, one_sided)?)
}

/// `S_λ(z + α Wᵀ(x - W z))` for an explicit bank `[P, C, n, m]`.
pub fn ista_step(
    bank: &Tensor,
    thresholds: &Tensor,
    x: &Tensor,
    z_prev: Option<&Tensor>,
    step: f64,
    one_sided: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = tape.constant(bank.clone());
    let t = tape.constant(thresholds.clone());
    let xv = tape.constant(x.clone());
    let zv = z_prev.map(|z| tape.constant(z.clone()));
    let out = ista_step_on_tape(&mut tape, b, t, xv, zv, step, one_sided)?;
    Ok(tape.value(out).clone())
}

/// One layer of the unrolled network applied to `x` from `z_prev`.
pub fn ista_layer_forward(layer: &GroupConvLayer, x: &Tensor, z_prev: Option<&Tensor>) -> Result<Tensor> {
    ista_step(&layer.expanded_bank()?, &layer.thresholds, x, z_prev, layer.step, layer.one_sided)
}

/// Batch normalisation parameters and running statistics for one code.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub batches_tracked: u64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            batches_tracked: 0,
        }
    }

    pub fn update(&mut self, stats: &BatchStats) {
        let blend = |run: &mut Tensor, batch: &[f64]| {
            for (r, b) in run.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        };
        blend(&mut self.running_mean, &stats.mean);
        blend(&mut self.running_var, &stats.var);
        self.batches_tracked += 1;
    }
}

/// Task-specific output stage.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// Average pool to `pool x pool`, flatten, affine map to class logits.
    Classifier { weight: Tensor, bias: Tensor, pool: usize },
    /// Synthesis of the final code with the first layer's bank.
    Reconstructor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with running statistics.
    Eval,
}

/// The whole unrolled network.
#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedNetwork {
    pub config: NetworkConfig,
    /// `L` layers, or a single shared layer when tied.
    pub layers: Vec<GroupConvLayer>,
    /// One per layer except the last.
    pub norms: Vec<BatchNorm>,
    pub head: Head,
}

/// Tape handles of every parameter, in [`UnfoldedNetwork::parameters`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub all: Vec<Var>,
    pub layers: Vec<BoundLayer>,
    pub norms: Vec<(Var, Var)>,
    pub head: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub generators: Vec<Var>,
    pub inverse_candidates: Vec<Var>,
    pub bases: Vec<Var>,
    pub thresholds: Var,
    pub bank: Var,
}

/// Result of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub params: BoundParams,
    pub input: Var,
    /// Code after each layer, before normalisation.
    pub codes: Vec<Var>,
    /// Batch statistics of each normalised code, in training mode.
    pub stats: Vec<BatchStats>,
    pub output: Var,
}

impl UnfoldedNetwork {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let distinct = if config.tied { 1 } else { config.layers };
        let layers = (0..distinct)
            .map(|_| GroupConvLayer::new(&config, rng))
            .collect::<Result<Vec<_>>>()?;
        let channels = config.code_channels();
        let norms = (1..config.layers).map(|_| BatchNorm::new(channels)).collect();
        let head = match config.task {
            Task::Classification => {
                let fan_in = channels * config.pool * config.pool;
                let bound = 1.0 / (fan_in as f64).sqrt();
                Head::Classifier {
                    weight: Tensor::rand_uniform([config.classes, fan_in], -bound, bound, rng),
                    bias: Tensor::rand_uniform([config.classes], -bound, bound, rng),
                    pool: config.pool,
                }
            }
            Task::Reconstruction => Head::Reconstructor,
        };
        Ok(UnfoldedNetwork {
            config,
            layers,
            norms,
            head,
        })
    }

    /// Layer used at depth `l`.
    pub fn layer_at(&self, l: usize) -> &GroupConvLayer {
        &self.layers[if self.config.tied { 0 } else { l }]
    }

    /// Every group action, as `(layer, group, action)`.
    pub fn group_actions(&self) -> impl Iterator<Item = (usize, usize, &GroupAction)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.groups.iter().enumerate().map(move |(k, g)| (l, k, g)))
    }

    /// Named trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, (g, basis)) in layer.groups.iter().zip(&layer.bases).enumerate() {
                out.push((format!("layer{l}.group{k}.A"), &g.generator));
                out.push((format!("layer{l}.group{k}.A_tilde"), &g.inverse_candidate));
                out.push((format!("layer{l}.group{k}.basis"), basis));
            }
            out.push((format!("layer{l}.threshold"), &layer.thresholds));
        }
        for (l, bn) in self.norms.iter().enumerate() {
            out.push((format!("norm{l}.gamma"), &bn.gamma));
            out.push((format!("norm{l}.beta"), &bn.beta));
        }
        if let Head::Classifier { weight, bias, .. } = &self.head {
            out.push(("head.weight".into(), weight));
            out.push(("head.bias".into(), bias));
        }
        out
    }

    /// Running statistics of every normalisation, as named tensors.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, bn) in self.norms.iter().enumerate() {
            out.push((format!("norm{l}.running_mean"), bn.running_mean.clone()));
            out.push((format!("norm{l}.running_var"), bn.running_var.clone()));
            out.push((format!("norm{l}.batches_tracked"), Tensor::scalar(bn.batches_tracked as f64)));
        }
        out
    }

    /// Mutable view of [`UnfoldedNetwork::parameters`], same order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for (g, basis) in layer.groups.iter_mut().zip(&mut layer.bases) {
                out.push(&mut g.generator);
                out.push(&mut g.inverse_candidate);
                out.push(basis);
            }
            out.push(&mut layer.thresholds);
        }
        for bn in &mut self.norms {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        if let Head::Classifier { weight, bias, .. } = &mut self.head {
            out.push(weight);
            out.push(bias);
        }
        out
    }

    pub fn clamp_thresholds(&mut self) {
        for layer in &mut self.layers {
            layer.clamp_thresholds();
        }
    }

    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        let all: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|(_, t)| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let mut cursor = all.iter().copied();
        let mut next = || cursor.next().expect("parameter list shorter than the network layout");
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (mut generators, mut inverse_candidates, mut bases) = (Vec::new(), Vec::new(), Vec::new());
            for _ in &layer.groups {
                generators.push(next());
                inverse_candidates.push(next());
                bases.push(next());
            }
            let thresholds = next();
            let order = layer.groups.first().map_or(1, |g| g.order);
            let bank = bank_on_tape(
                tape,
                &generators,
                &bases,
                order,
                self.config.filter_rows,
                self.config.filter_cols,
            )?;
            layers.push(BoundLayer {
                generators,
                inverse_candidates,
                bases,
                thresholds,
                bank,
            });
        }
        let norms = self.norms.iter().map(|_| (next(), next())).collect();
        let head = matches!(self.head, Head::Classifier { .. }).then(|| (next(), next()));
        Ok(BoundParams {
            all,
            layers,
            norms,
            head,
        })
    }

    /// Records the forward pass of a batch `[N, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode, trainable: bool) -> Result<Forward> {
        let cfg = &self.config;
        match x.shape() {
            [_, c, h, w] if *c == cfg.channels && *h >= cfg.filter_rows && *w >= cfg.filter_cols => {}
            other => {
                return Err(LgnError::Extent {
                    what: "network input",
                    expected: format!(
                        "[N, {}, H, W] with H >= {} and W >= {}",
                        cfg.channels, cfg.filter_rows, cfg.filter_cols
                    ),
                    got: format!("{other:?}"),
                })
            }
        }
        if mode == Mode::Eval {
            if self.norms.iter().any(|bn| bn.batches_tracked == 0) {
                return Err(LgnError::Invalid(
                    "uninitialized normalization statistics: evaluation mode needs at least one training batch".into(),
                ));
            }
        }
        let params = self.bind(tape, trainable)?;
        let input = tape.constant(x.clone());
        let mut z: Option<Var> = None;
        let mut codes = Vec::with_capacity(cfg.layers);
        let mut stats = Vec::new();
        for l in 0..cfg.layers {
            let bl = &params.layers[if cfg.tied { 0 } else { l }];
            let layer = self.layer_at(l);
            let code = ista_step_on_tape(tape, bl.bank, bl.thresholds, input, z, layer.step, layer.one_sided)?;
            codes.push(code);
            z = Some(if l + 1 < cfg.layers {
                let (gamma, beta) = params.norms[l];
                match mode {
                    Mode::Train => {
                        let (out, s) = tape.batch_norm(code, gamma, beta, BN_EPS)?;
                        stats.push(s);
                        out
                    }
                    Mode::Eval => {
                        let bn = &self.norms[l];
                        tape.batch_norm_eval(
                            code,
                            gamma,
                            beta,
                            bn.running_mean.data(),
                            bn.running_var.data(),
                            BN_EPS,
                        )?
                    }
                }
            } else {
                code
            });
        }
        let last = z.expect("at least one layer");
        let output = match (&self.head, params.head) {
            (Head::Classifier { pool, .. }, Some((weight, bias))) => {
                let pooled = tape.adaptive_avg_pool(last, *pool, *pool)?;
                let n = x.shape()[0];
                let features = cfg.code_channels() * pool * pool;
                let flat = tape.reshape(pooled, &[n, features])?;
                let wt = tape.transpose(weight)?;
                let logits = tape.matmul(flat, wt)?;
                tape.add_bias(logits, bias)?
            }
            _ => tape.conv2d_adjoint(last, params.layers[0].bank)?,
        };
        Ok(Forward {
            params,
            input,
            codes,
            stats,
            output,
        })
    }

    /// Output values without recording gradients.
    pub fn predict(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, x, mode, false)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Folds batch statistics from a training-mode pass into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.norms.iter_mut().zip(stats) {
            bn.update(s);
        }
    }
}

/// Loss settings shared by every training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub mu: f64,
    pub variant: LossVariant,
    pub squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mu: LossVariant::AuxInverse.default_mu(),
            variant: LossVariant::AuxInverse,
            squared: false,
        }
    }
}

/// A recorded training objective.
#[derive(Clone, Debug)]
pub struct TrainingLoss {
    pub forward: Forward,
    pub task: Var,
    /// One regulariser per distinct `(layer, group)`, in
    /// [`UnfoldedNetwork::group_actions`] order.
    pub regularizers: Vec<Var>,
    pub total: Var,
}

/// Task loss (cross-entropy or mean squared reconstruction error) plus the
/// selected invertibility regulariser summed over every group.
pub fn training_loss(
    net: &UnfoldedNetwork,
    tape: &mut Tape,
    x: &Tensor,
    labels: &[usize],
    loss: LossConfig,
) -> Result<TrainingLoss> {
    if !(loss.mu >= 0.0) {
        return Err(LgnError::Config(format!("mu must be nonnegative, got {}", loss.mu)));
    }
    let forward = net.forward(tape, x, Mode::Train, true)?;
    let task = match net.config.task {
        Task::Classification => tape.cross_entropy(forward.output, labels)?,
        Task::Reconstruction => {
            let diff = tape.sub(forward.output, forward.input)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean(sq)
        }
    };
    let mut total = task;
    let mut regularizers = Vec::new();
    if loss.mu > 0.0 {
        for bl in &forward.params.layers {
            for (&a, &at) in bl.generators.iter().zip(&bl.inverse_candidates) {
                let r = regularizer_on_tape(tape, a, at, loss.mu, loss.variant, loss.squared)?;
                regularizers.push(r);
                total = tape.add(total, r)?;
            }
        }
    }
    Ok(TrainingLoss {
        forward,
        task,
        regularizers,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            layers: 2,
            groups: 2,
            order: 3,
            filter_rows: 3,
            filter_cols: 3,
            channels: 2,
            pool: 2,
            init_scale: 0.2,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn tape_bank_matches_orbit_expansion_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = UnfoldedNetwork::new(small_config(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true).unwrap();
        for (layer, bl) in net.layers.iter().zip(&bound.layers) {
            let bank = layer.expanded_bank().unwrap();
            assert_eq!(bank.shape(), &[6, 2, 3, 3]);
            assert_eq!(tape.value(bl.bank), &bank);
            let g = &layer.groups[1];
            let orbit = g.expand_orbit(&layer.bases[1].index0(1).unwrap()).unwrap();
            assert_eq!(bank.index0(3 + 2).unwrap().index0(1).unwrap(), orbit.expanded[2]);
        }
    }

    #[test]
    fn parameter_views_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = UnfoldedNetwork::new(small_config(), &mut rng).unwrap();
        let shapes: Vec<Vec<usize>> = net.parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut_shapes: Vec<Vec<usize>> = net.parameters_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        let mut tape = Tape::new();
        assert_eq!(net.bind(&mut tape, true).unwrap().all.len(), shapes.len());
        let names: Vec<String> = net.parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "layer0.group0.A");
        assert_eq!(names.last().unwrap(), "head.bias");
    }

    #[test]
    fn identity_bank_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([2, 1, 6, 6], &mut rng).map(f64::abs);
        let bank = Tensor::ones([1, 1, 1, 1]);
        let z = ista_step(&bank, &Tensor::zeros([1]), &x, None, 1.0, false).unwrap();
        assert_eq!(z, x);
        let z1 = ista_step(&bank, &Tensor::zeros([1]), &x, None, 1.0, true).unwrap();
        assert_eq!(z1, x);
    }

    #[test]
    fn first_layer_reduces_to_scaled_analysis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([2, 2, 7, 7], &mut rng);
        let bank = Tensor::randn([5, 2, 3, 3], &mut rng);
        let z = ista_step(&bank, &Tensor::zeros([5]), &x, None, 0.3, false).unwrap();
        let expected = lgn_tensor::conv::conv2d_same(&x, &bank).unwrap().scale(0.3);
        assert!(z.max_abs_diff(&expected) < 1e-14);
        let zero = Tensor::zeros([2, 5, 7, 7]);
        let z0 = ista_step(&bank, &Tensor::zeros([5]), &x, Some(&zero), 0.3, false).unwrap();
        assert!(z0.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn rejects_bad_step_and_shapes() {
        let bank = Tensor::ones([1, 1, 1, 1]);
        let x = Tensor::zeros([1, 1, 6, 6]);
        assert!(ista_step(&bank, &Tensor::zeros([1]), &x, None, 0.0, true).is_err());
        let z = Tensor::zeros([1, 1, 5, 5]);
        assert!(ista_step(&bank, &Tensor::zeros([1]), &x, Some(&z), 0.1, true).is_err());
    }

    #[test]
    fn default_network_has_twenty_channel_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = UnfoldedNetwork::new(NetworkConfig::default(), &mut rng).unwrap();
        let x = Tensor::rand_uniform([2, 1, 12, 12], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &x, Mode::Train, false).unwrap();
        assert_eq!(fwd.codes.len(), 4);
        for &c in &fwd.codes {
            assert_eq!(tape.shape(c), &[2, 20, 12, 12]);
        }
        assert_eq!(tape.shape(fwd.output), &[2, 10]);
    }

    #[test]
    fn zero_input_gives_classifier_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = UnfoldedNetwork::new(small_config(), &mut rng).unwrap();
        for layer in &mut net.layers {
            layer.thresholds = Tensor::full([6], 0.1);
        }
        let logits = net.predict(&Tensor::zeros([3, 2, 6, 6]), Mode::Train).unwrap();
        let Head::Classifier { bias, .. } = &net.head else { unreachable!() };
        for i in 0..3 {
            assert_eq!(logits.row(i).unwrap(), bias.data());
        }
    }

    #[test]
    fn single_layer_network_matches_layer_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = NetworkConfig {
            layers: 1,
            task: Task::Reconstruction,
            ..small_config()
        };
        let net = UnfoldedNetwork::new(cfg, &mut rng).unwrap();
        let x = Tensor::randn([2, 2, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &x, Mode::Eval, false).unwrap();
        let direct = ista_layer_forward(&net.layers[0], &x, None).unwrap();
        assert_eq!(tape.value(fwd.codes[0]), &direct);
        let recon = lgn_tensor::conv::conv2d_adjoint(&direct, &net.layers[0].expanded_bank().unwrap()).unwrap();
        assert_eq!(tape.value(fwd.output), &recon);
    }

    #[test]
    fn eval_needs_running_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = UnfoldedNetwork::new(small_config(), &mut rng).unwrap();
        let x = Tensor::randn([4, 2, 6, 6], &mut rng);
        let err = net.predict(&x, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("uninitialized normalization statistics"));
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &x, Mode::Train, false).unwrap();
        net.update_running_stats(&fwd.stats);
        let a = net.predict(&x, Mode::Eval).unwrap();
        assert_eq!(a, net.predict(&x, Mode::Eval).unwrap());
    }

    #[test]
    fn tied_network_shares_one_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = NetworkConfig {
            layers: 3,
            tied: true,
            ..small_config()
        };
        let net = UnfoldedNetwork::new(cfg, &mut rng).unwrap();
        assert_eq!(net.layers.len(), 1);
        assert_eq!(net.norms.len(), 2);
        assert_eq!(net.group_actions().count(), 2);
        net.predict(&Tensor::randn([2, 2, 6, 6], &mut rng), Mode::Train).unwrap();
    }

    #[test]
    fn zero_mu_is_pure_task_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = UnfoldedNetwork::new(small_config(), &mut rng).unwrap();
        let x = Tensor::randn([4, 2, 6, 6], &mut rng);
        let labels = [0, 1, 2, 3];
        let mut tape = Tape::new();
        let cfg = LossConfig {
            mu: 0.0,
            ..LossConfig::default()
        };
        let l = training_loss(&net, &mut tape, &x, &labels, cfg).unwrap();
        assert_eq!(l.total, l.task);
        assert!(l.regularizers.is_empty());
        let mut tape = Tape::new();
        let l = training_loss(&net, &mut tape, &x, &labels, LossConfig::default()).unwrap();
        assert_eq!(l.regularizers.len(), 4);
        assert!(tape.value(l.total).item().unwrap() > tape.value(l.task).item().unwrap());
    }
}
