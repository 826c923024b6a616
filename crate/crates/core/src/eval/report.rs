use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{evaluate, Infer, Metrics};
use crate::data::{save_png, FusionSample};
use crate::engine::Tensor;
use crate::error::{Error, Result};

/// White gap between grid cells, in pixels.
pub const GRID_MARGIN: usize = 2;
/// Upper bound on rows in the report grid.
pub const GRID_ROWS: usize = 8;

/// `(width, height)` of a grid with `cols` columns and `rows` rows of `res` tiles.
pub fn grid_size(cols: usize, rows: usize, res: usize) -> (usize, usize) {
    (
        cols * res + (cols + 1) * GRID_MARGIN,
        rows * res + (rows + 1) * GRID_MARGIN,
    )
}

/// Tiles equally sized `3 x res x res` images row by row on a white canvas.
pub fn grid_image(rows: &[Vec<Tensor>]) -> Result<Tensor> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Contract("grid needs at least one image".into()))?;
    let res = first.shape()[1];
    let (w, h) = grid_size(cols, rows.len(), res);
    let mut data = vec![1.0; 3 * w * h];
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.shape() != first.shape() {
                return Err(Error::Dimension {
                    op: "grid_image",
                    axis: "height",
                    expected: res,
                    got: tile.shape()[1],
                });
            }
            let (top, left) = (GRID_MARGIN + r * (res + GRID_MARGIN), GRID_MARGIN + c * (res + GRID_MARGIN));
            let t = tile.data();
            for ch in 0..3 {
                for i in 0..res {
                    let src = &t[ch * res * res + i * res..ch * res * res + (i + 1) * res];
                    let start = ch * w * h + (top + i) * w + left;
                    data[start..start + res].copy_from_slice(src);
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes `grid.png` (columns x, y, G(x, y), oracle) and `metrics.json` into
/// `dir`. The last history record, if any, is echoed into the metrics file.
pub fn emit_report<H: Serialize>(
    history: &[H],
    samples: &[FusionSample],
    g: &impl Infer,
    dir: &Path,
    iteration: u64,
) -> Result<Metrics> {
    let metrics = evaluate(g, samples, iteration)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::new();
    for s in samples.iter().take(GRID_ROWS) {
        let out = g.infer(&s.x, &s.y)?;
        let oracle = s.oracle.clone().unwrap_or_else(|| Tensor::full(s.x.shape(), 1.0));
        rows.push(vec![s.x.clone(), s.y.clone(), out, oracle]);
    }
    save_png(&grid_image(&rows)?, &dir.join("grid.png"))?;
    let mut json = serde_json::to_value(&metrics).expect("metrics serialise");
    if let Some(last) = history.last() {
        json["last_record"] = serde_json::to_value(last).expect("history serialises");
    }
    let path = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&json).expect("json value prints");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(metrics)
}
