//! Runners that turn a dataset or a checkpoint into files on disk: the
//! patch-transform recovery grid, per-group structure reports, and the
//! circulant versus random diagonalisation baseline.

use std::path::Path;

use lgn_tensor::Tensor;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{circulant_from_diagonal, dft_conjugate, dft_conjugate_complex, offdiag_energy, StructureReport};
use crate::checkpoint::load_network;
use crate::data::{build_pairs, random_patches, ImageDataset, PairSet, PatchTransform, TransformKind};
use crate::error::{LgnError, Result};
use crate::export::{write_heatmap, write_json, write_matrix_csv, write_pairs_csv};
use crate::synthetic::{fit_action_gd, fit_action_lstsq, pair_mse, GdConfig, OperatorError, SyntheticFit};

const PIXELS_PER_ENTRY: usize = 8;

/// Rotations by 30, 45, 60 and 90 degrees, pooling with sides 3 to 6, and
/// pooling with sides 4 to 6 followed by a 60 degree rotation.
pub fn full_grid() -> Vec<TransformKind> {
    let rotations = [30.0, 45.0, 60.0, 90.0].map(|degrees| TransformKind::Rotate { degrees });
    let pools = [3, 4, 5, 6].map(|side| TransformKind::AvgPool { side });
    let composed = [4, 5, 6].map(|side| TransformKind::Compose { side, degrees: 60.0 });
    rotations.into_iter().chain(pools).chain(composed).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub cells: Vec<TransformKind>,
    /// Training samples, counted after the per-channel split.
    pub patches: usize,
    pub heldout: usize,
    pub patch_size: usize,
    pub gd: GdConfig,
    pub seed: u64,
    /// Also write the training pairs of every cell as CSV.
    pub export_pairs: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            cells: full_grid(),
            patches: 10_000,
            heldout: 1_000,
            patch_size: 6,
            gd: GdConfig::default(),
            seed: 0,
            export_pairs: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitSummary {
    pub max_abs_error: f64,
    pub relative_frobenius_error: f64,
    pub train_mse: f64,
    pub heldout_mse: f64,
    pub rank_deficient: bool,
}

impl FitSummary {
    fn of(fit: &SyntheticFit, analytic: &Tensor, heldout: &PairSet) -> Result<Self> {
        let err = OperatorError::between(&fit.operator, analytic)?;
        Ok(FitSummary {
            max_abs_error: err.max_abs,
            relative_frobenius_error: err.relative_frobenius,
            train_mse: fit.train_mse,
            heldout_mse: pair_mse(&fit.operator, heldout)?,
            rank_deficient: fit.rank_deficient,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellReport {
    pub tag: String,
    pub transform: &'static str,
    pub degrees: Option<f64>,
    pub radius: Option<usize>,
    pub gd_seed_stream: u64,
    pub gd: FitSummary,
    pub lstsq: FitSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridManifest {
    pub seed: u64,
    pub dataset_sha256: String,
    pub patches: usize,
    pub heldout: usize,
    pub patch_size: usize,
    pub gd_epochs: usize,
    pub gd_lr: f64,
    pub cells: Vec<CellReport>,
}

/// Fitted and analytic operators of one cell, kept in memory for callers
/// that check them directly.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub transform: PatchTransform,
    pub gd: SyntheticFit,
    pub lstsq: SyntheticFit,
}

fn draw_samples(data: &ImageDataset, n: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let channels = data.image_shape().0;
    let mut samples = random_patches(data, n.div_ceil(channels), size, rng)?;
    samples.truncate(n);
    Ok(samples)
}

fn describe(kind: TransformKind) -> (&'static str, Option<f64>, Option<usize>) {
    match kind {
        TransformKind::Rotate { degrees } => ("rotate", Some(degrees), None),
        TransformKind::AvgPool { side } => ("avgpool", None, Some(side)),
        TransformKind::Compose { side, degrees } => ("compose", Some(degrees), Some(side)),
    }
}

/// Fits every cell on one shared set of patches and writes, per cell,
/// `analytic.csv`, `gd.csv`, `lstsq.csv` with matching heatmaps, plus
/// `manifest.json` at the top of `out`.
pub fn run_synthetic_grid(data: &ImageDataset, cfg: &GridConfig, out: &Path) -> Result<(GridManifest, Vec<CellResult>)> {
    if cfg.cells.is_empty() {
        return Err(LgnError::Config("synthetic grid has no cells".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = draw_samples(data, cfg.patches, cfg.patch_size, &mut rng)?;
    let test = draw_samples(data, cfg.heldout, cfg.patch_size, &mut rng)?;
    let mut cells = Vec::with_capacity(cfg.cells.len());
    let mut results = Vec::with_capacity(cfg.cells.len());
    for (i, &kind) in cfg.cells.iter().enumerate() {
        let t = PatchTransform::new(kind, cfg.patch_size)?;
        let tag = kind.tag();
        log::info!("fitting {tag}");
        let pairs = build_pairs(&train, &t)?;
        let heldout = build_pairs(&test, &t)?;
        let stream = i as u64 + 1;
        let mut cell_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        cell_rng.set_stream(stream);
        let gd = fit_action_gd(&pairs, cfg.gd, &mut cell_rng)?;
        let lstsq = fit_action_lstsq(&pairs)?;
        let dir = out.join(&tag);
        for (stem, m) in [("analytic", t.operator()), ("gd", &gd.operator), ("lstsq", &lstsq.operator)] {
            write_matrix_csv(&dir.join(format!("{stem}.csv")), m)?;
            write_heatmap(&dir, stem, m, PIXELS_PER_ENTRY)?;
        }
        if cfg.export_pairs {
            write_pairs_csv(&dir.join("pairs.csv"), &pairs)?;
        }
        let (transform, degrees, radius) = describe(kind);
        cells.push(CellReport {
            tag,
            transform,
            degrees,
            radius,
            gd_seed_stream: stream,
            gd: FitSummary::of(&gd, t.operator(), &heldout)?,
            lstsq: FitSummary::of(&lstsq, t.operator(), &heldout)?,
        });
        results.push(CellResult { transform: t, gd, lstsq });
    }
    let manifest = GridManifest {
        seed: cfg.seed,
        dataset_sha256: data.content_digest(),
        patches: train.len(),
        heldout: test.len(),
        patch_size: cfg.patch_size,
        gd_epochs: cfg.gd.epochs,
        gd_lr: cfg.gd.lr,
        cells,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok((manifest, results))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub layer: usize,
    pub group: usize,
    #[serde(flatten)]
    pub structure: StructureReport,
}

/// One report per group action of the checkpoint, written to
/// `reports.json`, with heatmaps of `A`, of `A` applied to the identity
/// filter, and of `|F A F^H|`.
pub fn analyze_checkpoint(path: &Path, out: &Path) -> Result<Vec<GroupReport>> {
    let (net, _) = load_network(path)?;
    let mut reports = Vec::new();
    for (layer, group, g) in net.group_actions() {
        let structure = StructureReport::of(g)?;
        let stem = format!("layer{layer}_group{group}");
        write_matrix_csv(&out.join(format!("{stem}_A.csv")), &g.generator)?;
        write_heatmap(out, &format!("{stem}_A"), &g.generator, PIXELS_PER_ENTRY)?;
        write_heatmap(out, &format!("{stem}_probe"), &structure.identity_probe, 4 * PIXELS_PER_ENTRY)?;
        write_heatmap(out, &format!("{stem}_dft"), &dft_conjugate(&g.generator)?.abs(), PIXELS_PER_ENTRY)?;
        reports.push(GroupReport { layer, group, structure });
    }
    write_json(&out.join("reports.json"), &reports)?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineReport {
    pub size: usize,
    pub seed: u64,
    pub circulant_offdiag_energy: f64,
    pub random_offdiag_energy: f64,
}

/// A random real circulant and a Gaussian matrix of side `n`, each with the
/// magnitude of its DFT conjugation.
pub fn dft_baselines(n: usize, seed: u64, out: &Path) -> Result<BaselineReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first_row: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let circulant = Tensor::from_fn2(n, n, |i, j| first_row[(j + n - i) % n]);
    let random = Tensor::randn([n, n], &mut rng);
    let fc = dft_conjugate(&circulant)?;
    let fr = dft_conjugate(&random)?;
    for (stem, m) in [
        ("circulant", circulant.clone()),
        ("circulant_dft", fc.abs()),
        ("random", random.clone()),
        ("random_dft", fr.abs()),
    ] {
        write_heatmap(out, stem, &m, PIXELS_PER_ENTRY)?;
    }
    let report = BaselineReport {
        size: n,
        seed,
        circulant_offdiag_energy: offdiag_energy(&fc)?,
        random_offdiag_energy: offdiag_energy(&fr)?,
    };
    write_json(&out.join("baseline.json"), &report)?;
    Ok(report)
}

/// Rebuilds a circulant from a diagonal and checks the conjugation returns it.
pub fn diagonal_roundtrip_error(d: &[Complex64]) -> Result<f64> {
    let c = circulant_from_diagonal(d);
    let back = dft_conjugate_complex(&c)?;
    Ok((0..d.len())
        .flat_map(|i| (0..d.len()).map(move |j| (i, j)))
        .map(|(i, j)| {
            let expect = if i == j { d[i] } else { Complex64::new(0.0, 0.0) };
            (back.get(i, j) - expect).norm()
        })
        .fold(0.0, f64::max))
}
