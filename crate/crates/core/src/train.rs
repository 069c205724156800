//! Run configuration and the training loop.
//!
//! A run writes `metrics.jsonl` (one record per epoch, a pure function of the
//! configuration and seed), `timing.jsonl` (wall-clock seconds per epoch),
//! the resolved `config.toml`, and `checkpoint.lgn` after the last epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lgn_tensor::{AdamConfig, AdamState, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::save_network;
use crate::data::{load_cifar10, load_mnist, ImageDataset, Split};
use crate::error::{io_err, LgnError, Result};
use crate::group::LossVariant;
use crate::unfolded::{training_loss, LossConfig, Mode, NetworkConfig, Task, UnfoldedNetwork};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    #[default]
    Mnist,
    Cifar10,
}

impl Dataset {
    pub fn channels(self) -> usize {
        match self {
            Dataset::Mnist => 1,
            Dataset::Cifar10 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Cifar10 => "cifar10",
        }
    }
}

impl std::str::FromStr for Dataset {
    type Err = LgnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Dataset::Mnist),
            "cifar10" => Ok(Dataset::Cifar10),
            other => Err(LgnError::Config(format!("unknown dataset {other:?} (expected mnist or cifar10)"))),
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub task: Task,
    pub layers: usize,
    pub groups: usize,
    pub order: usize,
    pub filter_size: usize,
    pub step_size: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Regulariser weight; when absent the variant's default is used.
    pub mu: Option<f64>,
    pub loss_variant: LossVariant,
    /// Square the Frobenius norm of the auxiliary-inverse term.
    pub squared_norm: bool,
    pub tied: bool,
    pub one_sided: bool,
    pub init_scale: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Use only the first `subset` training images.
    pub subset: Option<usize>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: Dataset::Mnist,
            task: Task::Classification,
            layers: 4,
            groups: 5,
            order: 4,
            filter_size: 6,
            step_size: 0.01,
            lr: 0.01,
            epochs: 100,
            mu: None,
            loss_variant: LossVariant::AuxInverse,
            squared_norm: false,
            tied: false,
            one_sided: true,
            init_scale: 0.01,
            batch_size: 64,
            seed: 0,
            subset: None,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LgnError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LgnError::Config(e.to_string()))
    }

    pub fn mu(&self) -> f64 {
        self.mu.unwrap_or_else(|| self.loss_variant.default_mu())
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            layers: self.layers,
            groups: self.groups,
            order: self.order,
            filter_rows: self.filter_size,
            filter_cols: self.filter_size,
            channels: self.dataset.channels(),
            step: self.step_size,
            one_sided: self.one_sided,
            tied: self.tied,
            task: self.task,
            init_scale: self.init_scale,
            ..NetworkConfig::default()
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            mu: self.mu(),
            variant: self.loss_variant,
            squared: self.squared_norm,
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(LgnError::Config(msg)) = self.network().validate() {
            problems.push(msg);
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.mu() >= 0.0 && self.mu().is_finite()) {
            problems.push(format!("mu must be nonnegative, got {}", self.mu()));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if self.subset == Some(0) {
            problems.push("subset must be positive when given".into());
        }
        if self.dataset == Dataset::Mnist && self.filter_size > 28 || self.filter_size > 32 {
            problems.push(format!("filter_size {} exceeds the image size", self.filter_size));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LgnError::Config(problems.join("; ")))
        }
    }

    /// Learning rate for 0-based `epoch`, halved once each time training
    /// passes 50%, 75% and 87.5% of `epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let progress = epoch as f64 / self.epochs.max(1) as f64;
        let halvings = [0.5, 0.75, 0.875].iter().filter(|&&m| progress >= m).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// Loads the training split named by `cfg`, truncated to its subset.
pub fn load_training_data(cfg: &RunConfig) -> Result<ImageDataset> {
    let data = match cfg.dataset {
        Dataset::Mnist => load_mnist(&cfg.data_dir.join("mnist"), Split::Train)?,
        Dataset::Cifar10 => load_cifar10(&cfg.data_dir.join("cifar10"), Split::Train)?,
    };
    Ok(match cfg.subset {
        Some(n) => data.truncate(n),
        None => data,
    })
}

/// Per-epoch record written to `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over batches of the task loss seen during the epoch.
    pub task_loss: f64,
    pub regularizer: f64,
    pub train_accuracy: Option<f64>,
    /// `||A Ã - I||_F / sqrt(nm)` per group, in layer-major order.
    pub inverse_residuals: Vec<f64>,
    pub order_defects: Vec<f64>,
    pub min_singular_values: Vec<f64>,
}

/// Task loss and accuracy of a pass over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub task_loss: f64,
    pub accuracy: Option<f64>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub net: UnfoldedNetwork,
    data: ImageDataset,
    adam: AdamState,
    shuffle_rng: ChaCha8Rng,
    epoch: usize,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| logits.row(*i).map(argmax).ok() == Some(l))
        .count()
}

impl Trainer {
    pub fn new(config: RunConfig, data: ImageDataset) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = data.image_shape();
        if c != config.dataset.channels() || h < config.filter_size || w < config.filter_size {
            return Err(LgnError::Config(format!(
                "dataset images are {c}x{h}x{w}, incompatible with the configuration"
            )));
        }
        if data.is_empty() {
            return Err(LgnError::Config("training set is empty".into()));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = UnfoldedNetwork::new(config.network(), &mut init_rng)?;
        let params: Vec<Tensor> = net.parameters().into_iter().map(|(_, t)| t.clone()).collect();
        let adam = AdamState::new(AdamConfig::with_lr(config.lr), &params);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(1);
        Ok(Trainer {
            config,
            net,
            data,
            adam,
            shuffle_rng,
            epoch: 0,
        })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn data(&self) -> &ImageDataset {
        &self.data
    }

    fn batches(&self, order: &[usize]) -> Vec<Vec<usize>> {
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// One optimiser step; returns `(task loss, regulariser, correct predictions)`.
    pub fn step(&mut self, indices: &[usize]) -> Result<(f64, f64, usize)> {
        let (x, labels) = self.data.batch(indices);
        let mut tape = Tape::new();
        let loss = training_loss(&self.net, &mut tape, &x, &labels, self.config.loss())?;
        let task = tape.value(loss.task).item()?;
        let reg = tape.value(loss.total).item()? - task;
        if !task.is_finite() || !reg.is_finite() {
            return Err(LgnError::Diverged(format!(
                "loss became non-finite at epoch {}; try a lower lr than {}",
                self.epoch + 1,
                self.config.lr
            )));
        }
        let hits = match self.net.config.task {
            Task::Classification => correct(tape.value(loss.forward.output), &labels),
            Task::Reconstruction => 0,
        };
        let grads = tape.backward(loss.total)?;
        let mut params: Vec<Tensor> = self.net.parameters().into_iter().map(|(_, t)| t.clone()).collect();
        let g: Vec<Tensor> = loss
            .forward
            .params
            .all
            .iter()
            .zip(&params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        self.adam.step(&mut params, &g).map_err(|e| match e {
            TensorError::NonFinite { .. } => LgnError::Diverged(format!("{e}; try a lower lr than {}", self.config.lr)),
            other => other.into(),
        })?;
        for (slot, p) in self.net.parameters_mut().into_iter().zip(params) {
            *slot = p;
        }
        self.net.clamp_thresholds();
        self.net.update_running_stats(&loss.forward.stats);
        Ok((task, reg, hits))
    }

    /// Shuffles, runs one pass of optimiser steps and returns the epoch record.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let lr = self.config.lr_at(self.epoch);
        self.adam.set_lr(lr);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let (mut task_sum, mut reg_sum, mut hits) = (0.0, 0.0, 0);
        let batches = self.batches(&order);
        for b in &batches {
            let (t, r, h) = self.step(b)?;
            task_sum += t;
            reg_sum += r;
            hits += h;
        }
        self.epoch += 1;
        let n = batches.len() as f64;
        let mut record = EpochMetrics {
            epoch: self.epoch,
            lr,
            task_loss: task_sum / n,
            regularizer: reg_sum / n,
            train_accuracy: (self.net.config.task == Task::Classification)
                .then(|| hits as f64 / self.data.len() as f64),
            inverse_residuals: Vec::new(),
            order_defects: Vec::new(),
            min_singular_values: Vec::new(),
        };
        for (_, _, g) in self.net.group_actions() {
            record.inverse_residuals.push(g.normalized_inverse_residual()?);
            record.order_defects.push(g.order_defect()?);
            record.min_singular_values.push(g.min_singular_value()?);
        }
        Ok(record)
    }

    /// Task loss over the whole training set in fixed order, normalising each
    /// batch with its own statistics and leaving the network untouched.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let order: Vec<usize> = (0..self.data.len()).collect();
        let (mut loss_sum, mut hits) = (0.0, 0);
        for b in self.batches(&order) {
            let (x, labels) = self.data.batch(&b);
            let mut tape = Tape::new();
            let fwd = self.net.forward(&mut tape, &x, Mode::Train, false)?;
            let loss = match self.net.config.task {
                Task::Classification => {
                    hits += correct(tape.value(fwd.output), &labels);
                    tape.cross_entropy(fwd.output, &labels)?
                }
                Task::Reconstruction => {
                    let d = tape.sub(fwd.output, fwd.input)?;
                    let sq = tape.mul(d, d)?;
                    tape.mean(sq)
                }
            };
            loss_sum += tape.value(loss).item()? * b.len() as f64;
        }
        Ok(Evaluation {
            task_loss: loss_sum / self.data.len() as f64,
            accuracy: (self.net.config.task == Task::Classification).then(|| hits as f64 / self.data.len() as f64),
        })
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub seconds_per_epoch: Vec<f64>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(format!("creating {}", path.display())))?))
}

fn append_line<W: Write, T: Serialize>(w: &mut W, value: &T, path: &Path) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| LgnError::Invalid(e.to_string()))?;
    writeln!(w, "{line}")
        .and_then(|_| w.flush())
        .map_err(io_err(format!("writing {}", path.display())))
}

/// Trains for `config.epochs` epochs and writes every run artifact to `config.out_dir`.
pub fn run_training(config: &RunConfig, data: ImageDataset) -> Result<RunSummary> {
    config.validate()?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    std::fs::write(out.join("config.toml"), config.to_toml()?)
        .map_err(io_err(format!("writing {}", out.join("config.toml").display())))?;
    let digest = data.content_digest();
    let mut trainer = Trainer::new(config.clone(), data)?;

    let metrics_path = out.join("metrics.jsonl");
    let timing_path = out.join("timing.jsonl");
    let mut metrics_file = create(&metrics_path)?;
    let mut timing_file = create(&timing_path)?;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut seconds = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let start = Instant::now();
        let record = trainer.run_epoch()?;
        let elapsed = start.elapsed().as_secs_f64();
        log::info!(
            "epoch {}/{}: task loss {:.5}, regulariser {:.5}",
            record.epoch,
            config.epochs,
            record.task_loss,
            record.regularizer
        );
        append_line(&mut metrics_file, &record, &metrics_path)?;
        append_line(&mut timing_file, &json!({"epoch": record.epoch, "seconds": elapsed}), &timing_path)?;
        metrics.push(record);
        seconds.push(elapsed);
    }
    let checkpoint = out.join("checkpoint.lgn");
    save_network(
        &checkpoint,
        &trainer.net,
        json!({
            "epochs_completed": trainer.epoch(),
            "seed": config.seed,
            "dataset": config.dataset.name(),
            "dataset_sha256": digest,
            "mu": config.mu(),
            "loss_variant": config.loss_variant.name(),
        }),
    )?;
    Ok(RunSummary {
        metrics,
        checkpoint,
        seconds_per_epoch: seconds,
    })
}
