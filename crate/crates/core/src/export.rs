//! Plain-text and image exports: CSV matrices, 8-bit PGM heatmaps with a JSON
//! sidecar describing the colour scale, and pretty-printed JSON files.

use std::fmt::Write as _;
use std::path::Path;

use lgn_tensor::Tensor;
use serde::Serialize;

use crate::data::PairSet;
use crate::error::{io_err, LgnError, Result};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

/// Row-major CSV with shortest round-trip decimal formatting.
pub fn matrix_to_csv(m: &Tensor) -> Result<String> {
    let (rows, cols) = m.dims2()?;
    let mut out = String::new();
    for i in 0..rows {
        for j in 0..cols {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{}", m.get(&[i, j])).expect("writing to a string");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    write_file(path, matrix_to_csv(m)?.as_bytes())
}

/// Parses a CSV matrix written by [`matrix_to_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let values = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| LgnError::Invalid(format!("{}:{}: {e}", path.display(), line_no + 1)))?;
        if *cols.get_or_insert(values.len()) != values.len() {
            return Err(LgnError::Invalid(format!("{}:{}: ragged row", path.display(), line_no + 1)));
        }
        data.extend(values);
        rows += 1;
    }
    Ok(Tensor::new([rows, cols.unwrap_or(0)], data)?)
}

/// One row per pair: the input columns, then the target columns.
pub fn write_pairs_csv(path: &Path, pairs: &PairSet) -> Result<()> {
    let d = pairs.inputs.shape()[1];
    let mut out = String::new();
    let header: Vec<String> = (0..d)
        .map(|i| format!("x{i}"))
        .chain((0..d).map(|i| format!("y{i}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..pairs.len() {
        let row: Vec<String> = pairs
            .inputs
            .row(i)?
            .iter()
            .chain(pairs.targets.row(i)?)
            .map(|v| v.to_string())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Colour scale of a heatmap: gray level `round(255 (v / limit + 1) / 2)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapScale {
    pub mapping: &'static str,
    pub min_value: f64,
    pub max_value: f64,
    pub rows: usize,
    pub cols: usize,
    pub pixels_per_entry: usize,
}

/// Binary PGM of a matrix on a symmetric scale around zero, so mid-gray is
/// 0, black the most negative and white the most positive entry.
pub fn heatmap_pgm(m: &Tensor, pixels_per_entry: usize) -> Result<(Vec<u8>, HeatmapScale)> {
    let (rows, cols) = m.dims2()?;
    let k = pixels_per_entry.max(1);
    let limit = m.max_abs();
    let level = |v: f64| -> u8 {
        if limit == 0.0 {
            128
        } else {
            (255.0 * (v / limit + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8
        }
    };
    let mut out = format!("P5\n{} {}\n255\n", cols * k, rows * k).into_bytes();
    for i in 0..rows {
        let line: Vec<u8> = (0..cols)
            .flat_map(|j| std::iter::repeat_n(level(m.get(&[i, j])), k))
            .collect();
        for _ in 0..k {
            out.extend_from_slice(&line);
        }
    }
    Ok((
        out,
        HeatmapScale {
            mapping: "signed_symmetric",
            min_value: -limit,
            max_value: limit,
            rows,
            cols,
            pixels_per_entry: k,
        },
    ))
}

/// Writes `<stem>.pgm` and `<stem>.json`.
pub fn write_heatmap(dir: &Path, stem: &str, m: &Tensor, pixels_per_entry: usize) -> Result<()> {
    let (pgm, scale) = heatmap_pgm(m, pixels_per_entry)?;
    write_file(&dir.join(format!("{stem}.pgm")), &pgm)?;
    write_json(&dir.join(format!("{stem}.json")), &scale)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LgnError::Invalid(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
