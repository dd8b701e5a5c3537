//! JPEG quantization round trip on 8×8 blocks (no entropy coding, no chroma).

use std::sync::OnceLock;

use crate::error::{Error, Result};

use super::ImagePatch;

/// Example luminance quantization table from the JPEG standard, row-major.
pub const LUMINANCE_BASE_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// IJG percentage scale: `5000/Q` below 50, `200 − 2Q` otherwise.
pub fn quality_scale(quality: u8) -> Result<u32> {
    match quality {
        1..=49 => Ok(5000 / u32::from(quality)),
        50..=100 => Ok(200 - 2 * u32::from(quality)),
        _ => Err(Error::Param(format!("JPEG quality must be in 1..=100, got {quality}"))),
    }
}

/// Base table scaled for `quality`, each entry clamped to `1..=255`.
pub fn quant_table(quality: u8) -> Result<[u16; 64]> {
    let scale = quality_scale(quality)?;
    Ok(LUMINANCE_BASE_TABLE.map(|b| ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as u16))
}

fn dct_matrix() -> &'static [[f64; 8]; 8] {
    static M: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    M.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (k, row) in m.iter_mut().enumerate() {
            let alpha = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = alpha * ((2 * n + 1) as f64 * k as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        m
    })
}

/// Orthonormal 2-D type-II DCT of a row-major 8×8 block.
pub fn dct2(block: &[f64; 64]) -> [f64; 64] {
    let c = dct_matrix();
    let mut tmp = [0.0; 64];
    // rows: tmp = X Cᵀ
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|x| block[y * 8 + x] * c[v][x]).sum();
        }
    }
    let mut out = [0.0; 64];
    // columns: out = C tmp
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|y| c[u][y] * tmp[y * 8 + v]).sum();
        }
    }
    out
}

/// Inverse of [`dct2`].
pub fn idct2(coef: &[f64; 64]) -> [f64; 64] {
    let c = dct_matrix();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| c[u][y] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * c[v][x]).sum();
        }
    }
    out
}

/// Level shift, DCT, quantize, dequantize, inverse DCT, round and clamp,
/// block by block. Dimensions that are not multiples of 8 are padded by edge
/// replication and cropped back afterwards.
pub fn jpeg_degrade(patch: &ImagePatch, quality: u8) -> Result<ImagePatch> {
    let table = quant_table(quality)?;
    let (h, w) = (patch.height(), patch.width());
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let mut out = vec![0u8; h * w];
    let mut block = [0.0; 64];
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    let sy = (by + y).min(h - 1);
                    let sx = (bx + x).min(w - 1);
                    block[y * 8 + x] = f64::from(patch.get(sy, sx)) - 128.0;
                }
            }
            let mut coef = dct2(&block);
            for (c, &q) in coef.iter_mut().zip(&table) {
                let q = f64::from(q);
                *c = (*c / q).round() * q;
            }
            let rec = idct2(&coef);
            for y in 0..8 {
                for x in 0..8 {
                    let (oy, ox) = (by + y, bx + x);
                    if oy < h && ox < w {
                        out[oy * w + ox] = (rec[y * 8 + x] + 128.0).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    }
    ImagePatch::new(h, w, out)
}
