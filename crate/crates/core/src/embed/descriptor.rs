//! Built-in patch descriptor.
//!
//! The window is split into an 8x8 grid of cells. Each cell contributes its
//! mean R, G, B (scaled to [0, 1]) and an 8-bin histogram of unsigned
//! gradient orientation over [0, pi), weighted by gradient magnitude and
//! divided by the cell's pixel count. Gradients are central differences of
//! luminance `0.299 R + 0.587 G + 0.114 B` with edge pixels replicated.
//! Layout: 192 colour values (cell-major, row-major cells) followed by 512
//! histogram values, 704 in total, then L2-normalized.

use std::f64::consts::PI;

use super::{EmbedError, FeatureVector};
use crate::tube::TubeSlice;

pub const GRID: usize = 8;
pub const BINS: usize = 8;
pub const BUILTIN_DIM: usize = GRID * GRID * 3 + GRID * GRID * BINS;
pub(crate) const BUILTIN_ID: &str = "builtin-grid8-v1";

fn luminance(rgb: &[u8]) -> f64 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64) / 255.0
}

/// Cell index along one axis for pixel coordinate `p` in a window of `w`.
fn cell_of(p: usize, w: usize) -> usize {
    (p * GRID / w).min(GRID - 1)
}

pub fn embed_builtin(slice: &TubeSlice) -> Result<FeatureVector, EmbedError> {
    let w = slice.window as usize;
    let px = &slice.pixels;
    debug_assert_eq!(px.len(), w * w * 3);

    let lum: Vec<f64> = px.chunks_exact(3).map(luminance).collect();

    let mut colour = [0.0f64; GRID * GRID * 3];
    let mut hist = [0.0f64; GRID * GRID * BINS];
    let mut counts = [0usize; GRID * GRID];

    let bin_width = PI / BINS as f64;
    for y in 0..w {
        let cy = cell_of(y, w);
        let up = y.saturating_sub(1);
        let down = (y + 1).min(w - 1);
        for x in 0..w {
            let cell = cy * GRID + cell_of(x, w);
            let i = y * w + x;
            counts[cell] += 1;
            for c in 0..3 {
                colour[cell * 3 + c] += px[i * 3 + c] as f64;
            }

            let left = x.saturating_sub(1);
            let right = (x + 1).min(w - 1);
            let gx = (lum[y * w + right] - lum[y * w + left]) / 2.0;
            let gy = (lum[down * w + x] - lum[up * w + x]) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += PI;
            }
            if theta >= PI {
                theta -= PI;
            }
            let bin = ((theta / bin_width) as usize).min(BINS - 1);
            hist[cell * BINS + bin] += mag;
        }
    }

    let mut values = Vec::with_capacity(BUILTIN_DIM);
    for (cell, &n) in counts.iter().enumerate() {
        let n = n.max(1) as f64;
        values.extend(colour[cell * 3..cell * 3 + 3].iter().map(|s| s / n / 255.0));
    }
    for (cell, &n) in counts.iter().enumerate() {
        let n = n.max(1) as f64;
        values.extend(hist[cell * BINS..(cell + 1) * BINS].iter().map(|s| s / n));
    }
    FeatureVector::normalized(values, BUILTIN_ID)
}
