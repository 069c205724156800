//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, random patch extraction,
//! and the linear patch transforms used by the synthetic probes.

use std::fmt;
use std::path::{Path, PathBuf};

use lgn_tensor::Tensor;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{io_err, LgnError, Result};
use crate::group::linear_map_to_matrix;
use crate::vectorize::vec;

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images stored as bytes in `[N, C, H, W]` order with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    channels: usize,
    height: usize,
    width: usize,
    pub split: Split,
}

impl ImageDataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, channels: usize, height: usize, width: usize, split: Split) -> Result<Self> {
        if pixels.len() != labels.len() * channels * height * width {
            return Err(LgnError::Invalid(format!(
                "{} pixel bytes do not hold {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(ImageDataset {
            pixels,
            labels,
            channels,
            height,
            width,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let size = self.channels * self.height * self.width;
        &self.pixels[i * size..(i + 1) * size]
    }

    /// Image `i` as `[C, H, W]` with values in `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let data = self.raw_image(i).iter().map(|&b| f64::from(b) / 255.0).collect();
        Tensor::new([self.channels, self.height, self.width], data).expect("consistent image extent")
    }

    /// Images at `indices` as `[N, C, H, W]` with values in `[0, 1]`, and their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let size = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * size);
        for &i in indices {
            data.extend(self.raw_image(i).iter().map(|&b| f64::from(b) / 255.0));
        }
        let x = Tensor::new([indices.len(), self.channels, self.height, self.width], data)
            .expect("consistent batch extent");
        (x, indices.iter().map(|&i| self.label(i)).collect())
    }

    /// The first `n` images (all of them when `n` exceeds the length).
    pub fn truncate(&self, n: usize) -> ImageDataset {
        let n = n.min(self.len());
        let size = self.channels * self.height * self.width;
        ImageDataset {
            pixels: self.pixels[..n * size].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    /// Hex SHA-256 over the extents, labels and pixels.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.len(), self.channels, self.height, self.width] {
            h.update((d as u64).to_le_bytes());
        }
        h.update(&self.labels);
        h.update(&self.pixels);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> LgnError {
    LgnError::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, offset, "header ends early"))
}

/// Parses an IDX image file: magic 2051, count, rows, cols, then bytes.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(path, 0, format!("magic {magic}, expected {IDX_IMAGES_MAGIC}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let record = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * record {
        let complete = body.len() / record.max(1);
        let offset = 16 + complete.min(n) * record;
        return Err(parse_err(
            path,
            offset,
            format!("header declares {n} images of {rows}x{cols}, data holds {} bytes", body.len()),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

/// Parses an IDX label file: magic 2049, count, then one byte per label.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(path, 0, format!("magic {magic}, expected {IDX_LABELS_MAGIC}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(parse_err(
            path,
            8 + body.len().min(n),
            format!("header declares {n} labels, data holds {}", body.len()),
        ));
    }
    if let Some(pos) = body.iter().position(|&l| l > 9) {
        return Err(parse_err(path, 8 + pos, format!("label {} out of range", body[pos])));
    }
    Ok(body.to_vec())
}

fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads `train-*` or `t10k-*` IDX files from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<ImageDataset> {
    let (img_path, lbl_path) = mnist_paths(dir, split);
    let (n, rows, cols, pixels) = parse_idx_images(&read(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&read(&lbl_path)?, &lbl_path)?;
    if labels.len() != n {
        return Err(parse_err(
            &lbl_path,
            4,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    ImageDataset::new(pixels, labels, 1, rows, cols, split)
}

/// Parses CIFAR-10 binary records: a label byte then 3072 channel-major pixels.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let boundary = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(parse_err(
            path,
            boundary,
            format!("truncated record: {} trailing bytes of {CIFAR_RECORD}", bytes.len() - boundary),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(parse_err(path, i * CIFAR_RECORD, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Loads `data_batch_{1..5}.bin` (train) or `test_batch.bin` (test) from `dir`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<ImageDataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    load_cifar_files(&files, split)
}

/// Loads and concatenates the given CIFAR-10 batch files.
pub fn load_cifar_files(files: &[PathBuf], split: Split) -> Result<ImageDataset> {
    let (mut labels, mut pixels) = (Vec::new(), Vec::new());
    for f in files {
        let (l, p) = parse_cifar_batch(&read(f)?, f)?;
        labels.extend(l);
        pixels.extend(p);
    }
    ImageDataset::new(pixels, labels, 3, CIFAR_SIDE, CIFAR_SIDE, split)
}

/// A `size x size` crop of channel `channel` of `image [C, H, W]` with a
/// uniformly drawn top-left corner.
pub fn extract_patch<R: Rng + ?Sized>(image: &Tensor, channel: usize, size: usize, rng: &mut R) -> Result<Tensor> {
    let [c, h, w] = image.shape()[..] else {
        return Err(LgnError::Extent {
            what: "extract_patch",
            expected: "[C, H, W]".into(),
            got: format!("{:?}", image.shape()),
        });
    };
    if channel >= c || h < size || w < size {
        return Err(LgnError::Extent {
            what: "extract_patch",
            expected: format!("channel < {c} of an image at least {size}x{size}"),
            got: format!("channel {channel} of {h}x{w}"),
        });
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok(Tensor::from_fn2(size, size, |i, j| image.get(&[channel, top + i, left + j])))
}

fn exact_trig(degrees: f64) -> (f64, f64) {
    let turns = degrees / 90.0;
    if turns == turns.round() {
        match (turns.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = degrees.to_radians();
        (r.cos(), r.sin())
    }
}

/// Counter-clockwise rotation (as displayed) by `degrees` about the patch
/// centre, with bilinear interpolation and zero fill outside the patch.
///
/// Each output pixel samples the input at its position rotated back by
/// `degrees`. Multiples of 90° are exact permutations.
pub fn rotate_patch(patch: &Tensor, degrees: f64) -> Result<Tensor> {
    let (n, m) = patch.dims2()?;
    let (cos, sin) = exact_trig(degrees);
    let (cr, cc) = ((n as f64 - 1.0) / 2.0, (m as f64 - 1.0) / 2.0);
    Ok(Tensor::from_fn2(n, m, |r, c| {
        // display coordinates: x to the right, y up
        let (dx, dy) = (c as f64 - cc, cr - r as f64);
        let (sx, sy) = (cos * dx + sin * dy, -sin * dx + cos * dy);
        bilinear(patch, cr - sy, cc + sx)
    }))
}

fn bilinear(patch: &Tensor, row: f64, col: f64) -> f64 {
    let (n, m) = (patch.shape()[0] as isize, patch.shape()[1] as isize);
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let mut acc = 0.0;
    for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
            let (r, c) = (r0 + dr, c0 + dc);
            let w = wr * wc;
            if w != 0.0 && r >= 0 && c >= 0 && r < n && c < m {
                acc += w * patch.get(&[r as usize, c as usize]);
            }
        }
    }
    acc
}

/// Sliding mean over a `side x side` window that starts `side / 2` pixels
/// above and left of each pixel. Only in-bounds pixels are averaged.
pub fn avgpool_patch(patch: &Tensor, side: usize) -> Result<Tensor> {
    let (n, m) = patch.dims2()?;
    if side == 0 || side > n.max(m) {
        return Err(LgnError::Invalid(format!("pooling window {side} outside 1..={}", n.max(m))));
    }
    let half = (side / 2) as isize;
    Ok(Tensor::from_fn2(n, m, |i, j| {
        let r0 = (i as isize - half).max(0) as usize;
        let c0 = (j as isize - half).max(0) as usize;
        let r1 = ((i as isize - half + side as isize) as usize).min(n);
        let c1 = ((j as isize - half + side as isize) as usize).min(m);
        let mut acc = 0.0;
        for r in r0..r1 {
            for c in c0..c1 {
                acc += patch.get(&[r, c]);
            }
        }
        acc / ((r1 - r0) * (c1 - c0)) as f64
    }))
}

/// Which linear transform a [`PatchTransform`] applies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransformKind {
    Rotate { degrees: f64 },
    AvgPool { side: usize },
    /// Pooling first, then rotation.
    Compose { side: usize, degrees: f64 },
}

impl TransformKind {
    /// Short file-name friendly tag, e.g. `rotate_t45` or `compose_r4_t60`.
    pub fn tag(&self) -> String {
        match *self {
            TransformKind::Rotate { degrees } => format!("rotate_t{degrees}"),
            TransformKind::AvgPool { side } => format!("avgpool_r{side}"),
            TransformKind::Compose { side, degrees } => format!("compose_r{side}_t{degrees}"),
        }
    }
}

/// Parses `rotate:<degrees>`, `avgpool:<side>` or `compose:<side>:<degrees>`.
impl std::str::FromStr for TransformKind {
    type Err = LgnError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LgnError::Config(format!("bad transform {s:?}; use rotate:DEG, avgpool:SIDE or compose:SIDE:DEG"));
        let parts: Vec<&str> = s.split(':').collect();
        let deg = |v: &str| v.parse::<f64>().ok().filter(|d| d.is_finite()).ok_or_else(bad);
        let side = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["rotate", d] => Ok(TransformKind::Rotate { degrees: deg(d)? }),
            ["avgpool", r] => Ok(TransformKind::AvgPool { side: side(r)? }),
            ["compose", r, d] => Ok(TransformKind::Compose { side: side(r)?, degrees: deg(d)? }),
            _ => Err(bad()),
        }
    }
}

/// A linear transform of square patches with its matrix in vectorised coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTransform {
    pub kind: TransformKind,
    pub size: usize,
    operator: Tensor,
}

impl PatchTransform {
    pub fn new(kind: TransformKind, size: usize) -> Result<Self> {
        if let TransformKind::AvgPool { side } | TransformKind::Compose { side, .. } = kind {
            if side == 0 || side > size {
                return Err(LgnError::Invalid(format!("pooling window {side} outside 1..={size}")));
            }
        }
        let operator = linear_map_to_matrix(|p| apply_kind(kind, p), size, size)?;
        Ok(PatchTransform { kind, size, operator })
    }

    pub fn apply(&self, patch: &Tensor) -> Result<Tensor> {
        apply_kind(self.kind, patch)
    }

    /// `(size^2) x (size^2)` matrix with `vec(t(X)) = M vec(X)`.
    pub fn operator(&self) -> &Tensor {
        &self.operator
    }
}

fn apply_kind(kind: TransformKind, patch: &Tensor) -> Result<Tensor> {
    match kind {
        TransformKind::Rotate { degrees } => rotate_patch(patch, degrees),
        TransformKind::AvgPool { side } => avgpool_patch(patch, side),
        TransformKind::Compose { side, degrees } => rotate_patch(&avgpool_patch(patch, side)?, degrees),
    }
}

/// Applies `t` to `patch`.
pub fn apply_transform(t: &PatchTransform, patch: &Tensor) -> Result<Tensor> {
    t.apply(patch)
}

/// Row-stacked training pairs: `inputs[i] = vec(x_i)`, `targets[i] = vec(t(x_i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `patches` random crops (image, then corner) and splits each into
/// one sample per channel.
pub fn random_patches<R: Rng + ?Sized>(data: &ImageDataset, patches: usize, size: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    if data.is_empty() {
        return Err(LgnError::Invalid("cannot draw patches from an empty dataset".into()));
    }
    let (c, h, w) = data.image_shape();
    if h < size || w < size {
        return Err(LgnError::Extent {
            what: "random_patches",
            expected: format!("images at least {size}x{size}"),
            got: format!("{h}x{w}"),
        });
    }
    let mut out = Vec::with_capacity(patches * c);
    for _ in 0..patches {
        let idx = rng.random_range(0..data.len());
        let top = rng.random_range(0..=h - size);
        let left = rng.random_range(0..=w - size);
        let raw = data.raw_image(idx);
        for ch in 0..c {
            out.push(Tensor::from_fn2(size, size, |i, j| {
                f64::from(raw[(ch * h + top + i) * w + left + j]) / 255.0
            }));
        }
    }
    Ok(out)
}

/// Vectorised `(x, t(x))` pairs.
pub fn build_pairs(patches: &[Tensor], t: &PatchTransform) -> Result<PairSet> {
    let d = t.size * t.size;
    let mut inputs = Vec::with_capacity(patches.len() * d);
    let mut targets = Vec::with_capacity(patches.len() * d);
    for p in patches {
        inputs.extend_from_slice(vec(p)?.data());
        targets.extend_from_slice(vec(&t.apply(p)?)?.data());
    }
    Ok(PairSet {
        inputs: Tensor::new([patches.len(), d], inputs)?,
        targets: Tensor::new([patches.len(), d], targets)?,
    })
}
