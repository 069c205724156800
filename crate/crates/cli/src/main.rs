use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lgn::data::{load_cifar10, load_mnist, ImageDataset, Split, TransformKind};
use lgn::experiments::{analyze_checkpoint, dft_baselines, full_grid, run_synthetic_grid, GridConfig};
use lgn::group::LossVariant;
use lgn::synthetic::GdConfig;
use lgn::train::{load_training_data, run_training, Dataset, RunConfig};
use lgn::unfolded::Task;

/// Linear group networks: training, patch-transform recovery and analysis.
#[derive(Parser)]
#[command(name = "lgn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an unfolded network and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Fit linear maps to rotated / pooled image patches.
    Synthetic(SyntheticArgs),
    /// Report the structure of every group action in a checkpoint.
    Analyze(AnalyzeArgs),
    /// Diagonalise a circulant and a random matrix with the DFT.
    DftBaseline(BaselineArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with run configuration fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    /// aux_inverse, svd_sum or svd_logdet
    #[arg(long)]
    loss_variant: Option<LossVariant>,
    /// classification or reconstruction
    #[arg(long)]
    task: Option<Task>,
    /// mnist or cifar10
    #[arg(long)]
    dataset: Option<Dataset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SyntheticArgs {
    /// Source of the patches: mnist or cifar10.
    #[arg(long, default_value = "cifar10")]
    dataset: Dataset,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/synthetic")]
    out: PathBuf,
    /// Transform cells such as rotate:45, avgpool:3 or compose:4:60; the
    /// full grid when omitted.
    #[arg(long = "cell")]
    cells: Vec<TransformKind>,
    #[arg(long, default_value_t = 10_000)]
    patches: usize,
    #[arg(long, default_value_t = 1_000)]
    heldout: usize,
    #[arg(long, default_value_t = 200)]
    gd_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    gd_lr: f64,
    /// Also write the training pairs of each cell.
    #[arg(long)]
    export_pairs: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, default_value_t = 36)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/dft-baseline")]
    out: PathBuf,
}

fn train_config(args: TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.out {
        cfg.out_dir = v;
    }
    if let Some(v) = args.subset {
        cfg.subset = Some(v);
    }
    if let Some(v) = args.mu {
        cfg.mu = Some(v);
    }
    if let Some(v) = args.loss_variant {
        cfg.loss_variant = v;
    }
    if let Some(v) = args.task {
        cfg.task = v;
    }
    if let Some(v) = args.dataset {
        cfg.dataset = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.data_dir {
        cfg.data_dir = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_source(dataset: Dataset, dir: &Path) -> anyhow::Result<ImageDataset> {
    let data = match dataset {
        Dataset::Mnist => load_mnist(&dir.join("mnist"), Split::Train),
        Dataset::Cifar10 => load_cifar10(&dir.join("cifar10"), Split::Train),
    };
    data.with_context(|| format!("loading {} (run scripts/fetch_data.py first?)", dataset.name()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = train_config(args)?;
            let data = load_training_data(&cfg)
                .with_context(|| format!("loading {} (run scripts/fetch_data.py first?)", cfg.dataset.name()))?;
            let summary = run_training(&cfg, data)?;
            if let Some(last) = summary.metrics.last() {
                println!("epoch {}: task loss {:.5}", last.epoch, last.task_loss);
            }
            println!("checkpoint written to {}", summary.checkpoint.display());
        }
        Command::Synthetic(args) => {
            if args.patches == 0 || args.heldout == 0 {
                bail!("--patches and --heldout must be positive");
            }
            let data = load_source(args.dataset, &args.data_dir)?;
            let cfg = GridConfig {
                cells: if args.cells.is_empty() { full_grid() } else { args.cells },
                patches: args.patches,
                heldout: args.heldout,
                gd: GdConfig {
                    epochs: args.gd_epochs,
                    lr: args.gd_lr,
                },
                seed: args.seed,
                export_pairs: args.export_pairs,
                ..GridConfig::default()
            };
            let (manifest, _) = run_synthetic_grid(&data, &cfg, &args.out)?;
            for c in &manifest.cells {
                println!(
                    "{:<16} gd max-abs {:.4}  lstsq rel-frob {:.2e}",
                    c.tag, c.gd.max_abs_error, c.lstsq.relative_frobenius_error
                );
            }
            println!("manifest written to {}", args.out.join("manifest.json").display());
        }
        Command::Analyze(args) => {
            let out = args
                .out
                .unwrap_or_else(|| args.checkpoint.with_extension("").with_file_name("analysis"));
            let reports = analyze_checkpoint(&args.checkpoint, &out)?;
            for r in &reports {
                let s = &r.structure;
                println!(
                    "layer {} group {}: skew {:.3} toeplitz {:.3} dft off-diagonal {:.3} order defect {:.3}",
                    r.layer, r.group, s.skew, s.toeplitz, s.dft_offdiag_energy, s.order_defect
                );
            }
            println!("{} reports written to {}", reports.len(), out.join("reports.json").display());
        }
        Command::DftBaseline(args) => {
            let r = dft_baselines(args.size, args.seed, &args.out)?;
            println!(
                "off-diagonal energy: circulant {:.3e}, random {:.3}",
                r.circulant_offdiag_energy, r.random_offdiag_energy
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
