//! Area-average downsampling of interleaved images into flat vectors.

use super::render::View;
use crate::error::{Error, Result};

/// Per-axis overlap weights: `w[i]` lists `(pixel, weight)` with weights
/// summing to one over output cell `i`.
fn axis_weights(n: usize, r: usize) -> Vec<Vec<(usize, f64)>> {
    let cell = n as f64 / r as f64;
    (0..r)
        .map(|i| {
            let (lo, hi) = (i as f64 * cell, (i + 1) as f64 * cell);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|p| {
                    let overlap = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
                    (overlap > 0.0).then_some((p, overlap / cell))
                })
                .collect()
        })
        .collect()
}

fn check(len: usize, width: usize, height: usize, channels: usize, r: usize) -> Result<()> {
    if r == 0 || r > width.min(height) {
        return Err(Error::DimensionError(format!(
            "downsample side {r} must lie in 1..={}",
            width.min(height)
        )));
    }
    if channels == 0 || len != width * height * channels {
        return Err(Error::DimensionError(format!(
            "buffer of {len} values does not match {width}x{height}x{channels}"
        )));
    }
    Ok(())
}

/// Averages an interleaved `height × width × channels` buffer over an `r × r`
/// grid. Output is cell-major with channels interleaved: index `(i·r + j)·c + ch`.
pub fn area_downsample(values: &[f64], width: usize, height: usize, channels: usize, r: usize) -> Result<Vec<f64>> {
    check(values.len(), width, height, channels, r)?;
    let wx = axis_weights(width, r);
    let wy = axis_weights(height, r);
    let mut out = vec![0.0; r * r * channels];
    for (i, rows) in wy.iter().enumerate() {
        for (j, cols) in wx.iter().enumerate() {
            let cell = &mut out[(i * r + j) * channels..(i * r + j + 1) * channels];
            for &(y, a) in rows {
                for &(x, b) in cols {
                    let px = &values[(y * width + x) * channels..(y * width + x + 1) * channels];
                    for (o, v) in cell.iter_mut().zip(px) {
                        *o += a * b * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`area_downsample`]: spreads a cell-space vector back onto pixels.
pub fn area_downsample_adjoint(
    cells: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    r: usize,
) -> Result<Vec<f64>> {
    check(width * height * channels, width, height, channels, r)?;
    if cells.len() != r * r * channels {
        return Err(Error::DimensionMismatch {
            expected: r * r * channels,
            found: cells.len(),
        });
    }
    let wx = axis_weights(width, r);
    let wy = axis_weights(height, r);
    let mut out = vec![0.0; width * height * channels];
    for (i, rows) in wy.iter().enumerate() {
        for (j, cols) in wx.iter().enumerate() {
            let cell = &cells[(i * r + j) * channels..(i * r + j + 1) * channels];
            for &(y, a) in rows {
                for &(x, b) in cols {
                    let px = &mut out[(y * width + x) * channels..(y * width + x + 1) * channels];
                    for (o, v) in px.iter_mut().zip(cell) {
                        *o += a * b * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Byte image (or byte mask treated as intensities) to a flat vector in [0, 1].
pub fn featurize(bytes: &[u8], width: usize, height: usize, channels: usize, r: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    area_downsample(&values, width, height, channels, r)
}

pub fn featurize_view(view: &View, r: usize) -> Result<Vec<f64>> {
    featurize(&view.image, view.width, view.height, 3, r)
}
