//! Fixed-length forensic descriptor of a grayscale patch.
//!
//! Layout (before the final `ln(1 + v)` compression):
//! - `0..32`: for each cell of a 4×4 grid over the high-pass residual, the
//!   mean absolute residual then the RMS residual (row-major cells).
//! - `32..`: mean absolute block-DCT coefficient over all 8×8 blocks, for
//!   each bin in [`dct_bins`] order.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::types::FeatureVector;

use super::jpeg::dct2;
use super::ImagePatch;

pub const MIN_FEATURE_SIZE: usize = 32;
pub const POOL_GRID: usize = 4;
const RESIDUAL_FEATURES: usize = POOL_GRID * POOL_GRID * 2;
/// Number of DCT bins `(u, v)` with `u + v ≥ 3`.
pub const DCT_BIN_COUNT: usize = 58;
/// Descriptor length.
pub const FEATURE_DIM: usize = RESIDUAL_FEATURES + DCT_BIN_COUNT;

/// Mid/high-frequency bins `(u, v)` with `u + v ≥ 3`, row-major.
pub fn dct_bins() -> &'static [(usize, usize)] {
    static BINS: OnceLock<Vec<(usize, usize)>> = OnceLock::new();
    BINS.get_or_init(|| {
        let bins: Vec<_> = (0..8)
            .flat_map(|u| (0..8).map(move |v| (u, v)))
            .filter(|(u, v)| u + v >= 3)
            .collect();
        assert_eq!(bins.len(), DCT_BIN_COUNT);
        bins
    })
}

/// Offset of a DCT bin inside the descriptor.
pub fn dct_feature_index(u: usize, v: usize) -> Option<usize> {
    dct_bins()
        .iter()
        .position(|&b| b == (u, v))
        .map(|i| RESIDUAL_FEATURES + i)
}

/// 4-neighbour Laplacian residual with wrap-around borders.
pub fn highpass_residual(patch: &ImagePatch) -> Vec<f64> {
    let (h, w) = (patch.height(), patch.width());
    let px = |y: usize, x: usize| f64::from(patch.get(y, x));
    let mut r = vec![0.0; h * w];
    for y in 0..h {
        let (up, down) = ((y + h - 1) % h, (y + 1) % h);
        for x in 0..w {
            let (left, right) = ((x + w - 1) % w, (x + 1) % w);
            r[y * w + x] = 4.0 * px(y, x) - px(up, x) - px(down, x) - px(y, left) - px(y, right);
        }
    }
    r
}

/// Mean |DCT coefficient| per bin over every full 8×8 block, in row-major
/// bin order (all 64 bins).
pub fn block_dct_magnitudes(patch: &ImagePatch) -> [f64; 64] {
    let (h, w) = (patch.height(), patch.width());
    let mut acc = [0.0; 64];
    let mut blocks = 0usize;
    let mut block = [0.0; 64];
    for by in (0..h / 8 * 8).step_by(8) {
        for bx in (0..w / 8 * 8).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = f64::from(patch.get(by + y, bx + x)) - 128.0;
                }
            }
            for (a, c) in acc.iter_mut().zip(dct2(&block)) {
                *a += c.abs();
            }
            blocks += 1;
        }
    }
    acc.iter_mut().for_each(|a| *a /= blocks.max(1) as f64);
    acc
}

pub fn extract_features(patch: &ImagePatch) -> Result<FeatureVector> {
    let (h, w) = (patch.height(), patch.width());
    if h < MIN_FEATURE_SIZE || w < MIN_FEATURE_SIZE {
        return Err(Error::Size {
            height: h,
            width: w,
            min: MIN_FEATURE_SIZE,
        });
    }
    let residual = highpass_residual(patch);
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for cy in 0..POOL_GRID {
        let (y0, y1) = (cy * h / POOL_GRID, (cy + 1) * h / POOL_GRID);
        for cx in 0..POOL_GRID {
            let (x0, x1) = (cx * w / POOL_GRID, (cx + 1) * w / POOL_GRID);
            let (mut abs, mut sq) = (0.0, 0.0);
            for y in y0..y1 {
                for &r in &residual[y * w + x0..y * w + x1] {
                    abs += r.abs();
                    sq += r * r;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            out.push(abs / n);
            out.push((sq / n).sqrt());
        }
    }
    let mags = block_dct_magnitudes(patch);
    out.extend(dct_bins().iter().map(|&(u, v)| mags[u * 8 + v]));
    debug_assert_eq!(out.len(), FEATURE_DIM);
    FeatureVector::new(out.into_iter().map(f64::ln_1p).collect())
}
