//! Frequency-branch preprocessing: full-range BT.601 YCbCr conversion on the
//! `[0, 1]` scale followed by an orthonormal 8×8 blockwise DCT-II per
//! component.
//!
//! The colour transform is fixed bit-exactly so alternate implementations
//! agree:
//!
//! ```text
//! Y  = 0.299 R + 0.587 G + 0.114 B
//! Cb = 0.5 + 0.564 (B - Y)
//! Cr = 0.5 + 0.713 (R - Y)
//! ```
//!
//! No quantisation or zig-zag reordering is applied; coefficient `(u, v)` of
//! the block whose top-left pixel is `(8i, 8j)` is stored at `(8i + u, 8j + v)`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::Image;

pub const BLOCK: usize = 8;

pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;
pub const CB_SCALE: f64 = 0.564;
pub const CR_SCALE: f64 = 0.713;

/// Linear part of the RGB → YCbCr map (rows Y, Cb, Cr; columns R, G, B).
pub const YCBCR_LINEAR: [[f64; 3]; 3] = [
    [KR, KG, KB],
    [-CB_SCALE * KR, -CB_SCALE * KG, CB_SCALE * (1.0 - KB)],
    [CR_SCALE * (1.0 - KR), -CR_SCALE * KG, -CR_SCALE * KB],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyConfig {
    pub block: usize,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self { block: BLOCK }
    }
}

/// Blockwise DCT coefficients, `height × width × 3`, channel order Y, Cb, Cr.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMap {
    pub height: usize,
    pub width: usize,
    pub coeffs: Vec<f64>,
}

impl FrequencyMap {
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.coeffs[(row * self.width + col) * 3 + channel]
    }

    /// Extracts one component as an `height × width` plane.
    pub fn channel(&self, channel: usize) -> Vec<f64> {
        self.coeffs.iter().skip(channel).step_by(3).copied().collect()
    }
}

fn dct_basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let n = BLOCK as f64;
        let mut c = [[0.0; BLOCK]; BLOCK];
        for (u, row) in c.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha
                    * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2.0 * n)).cos();
            }
        }
        c
    })
}

fn check_range(pixels: &[f64]) -> Result<()> {
    match pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::Domain(format!(
            "pixel value {} at index {i} outside [0, 1]",
            pixels[i]
        ))),
        None => Ok(()),
    }
}

#[inline]
fn ycbcr_pixel(r: f64, g: f64, b: f64) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    [y, 0.5 + CB_SCALE * (b - y), 0.5 + CR_SCALE * (r - y)]
}

/// Converts interleaved RGB pixels to interleaved YCbCr.
pub fn rgb_to_ycbcr(pixels: &[f64]) -> Result<Vec<f64>> {
    if !pixels.len().is_multiple_of(3) {
        return Err(Error::Shape(format!(
            "interleaved RGB buffer of length {} is not a multiple of 3",
            pixels.len()
        )));
    }
    check_range(pixels)?;
    Ok(pixels
        .chunks_exact(3)
        .flat_map(|p| ycbcr_pixel(p[0], p[1], p[2]))
        .collect())
}

/// Inverse of [`rgb_to_ycbcr`] (no range check; used for round-trip checks).
pub fn ycbcr_to_rgb(pixels: &[f64]) -> Vec<f64> {
    pixels
        .chunks_exact(3)
        .flat_map(|p| {
            let (y, cb, cr) = (p[0], p[1] - 0.5, p[2] - 0.5);
            let r = y + cr / CR_SCALE;
            let b = y + cb / CB_SCALE;
            let g = (y - KR * r - KB * b) / KG;
            [r, g, b]
        })
        .collect()
}

fn check_blocks(height: usize, width: usize, len: usize) -> Result<()> {
    if !height.is_multiple_of(BLOCK) || !width.is_multiple_of(BLOCK) {
        return Err(Error::Shape(format!(
            "{height}×{width} plane is not divisible into {BLOCK}×{BLOCK} blocks"
        )));
    }
    if height * width != len {
        return Err(Error::Shape(format!(
            "plane of {len} values does not match {height}×{width}"
        )));
    }
    Ok(())
}

/// Applies `out = A · block · Bᵀ` (or the transposed variant) to every 8×8
/// block of a strided plane. `forward` selects DCT (`C X Cᵀ`) versus
/// inverse (`Cᵀ X C`).
fn transform_plane(
    src: &[f64],
    dst: &mut [f64],
    height: usize,
    width: usize,
    stride: usize,
    offset: usize,
    forward: bool,
    accumulate: bool,
) {
    let c = dct_basis();
    let at = |r: usize, col: usize| (r * width + col) * stride + offset;
    let mut block = [[0.0; BLOCK]; BLOCK];
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for bi in (0..height).step_by(BLOCK) {
        for bj in (0..width).step_by(BLOCK) {
            for (x, row) in block.iter_mut().enumerate() {
                for (y, v) in row.iter_mut().enumerate() {
                    *v = src[at(bi + x, bj + y)];
                }
            }
            // tmp = A · block
            for u in 0..BLOCK {
                for y in 0..BLOCK {
                    let mut s = 0.0;
                    for x in 0..BLOCK {
                        let a = if forward { c[u][x] } else { c[x][u] };
                        s += a * block[x][y];
                    }
                    tmp[u][y] = s;
                }
            }
            // out = tmp · Aᵀ
            for u in 0..BLOCK {
                for v in 0..BLOCK {
                    let mut s = 0.0;
                    for y in 0..BLOCK {
                        let a = if forward { c[v][y] } else { c[y][v] };
                        s += tmp[u][y] * a;
                    }
                    let idx = at(bi + u, bj + v);
                    if accumulate {
                        dst[idx] += s;
                    } else {
                        dst[idx] = s;
                    }
                }
            }
        }
    }
}

/// Orthonormal 2-D DCT-II of every non-overlapping 8×8 block of a plane.
pub fn block_dct8(channel: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    check_blocks(height, width, channel.len())?;
    let mut out = vec![0.0; channel.len()];
    transform_plane(channel, &mut out, height, width, 1, 0, true, false);
    Ok(out)
}

/// Inverse of [`block_dct8`].
pub fn inverse_block_dct8(coeffs: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    check_blocks(height, width, coeffs.len())?;
    let mut out = vec![0.0; coeffs.len()];
    transform_plane(coeffs, &mut out, height, width, 1, 0, false, false);
    Ok(out)
}

pub fn frequency_map(image: &Image, cfg: &FrequencyConfig) -> Result<FrequencyMap> {
    if cfg.block != BLOCK {
        return Err(Error::Config(format!(
            "only {BLOCK}×{BLOCK} blocks are supported, got {}",
            cfg.block
        )));
    }
    let (h, w) = (image.side(), image.side());
    check_blocks(h, w, image.pixels().len() / 3)?;
    let ycc = rgb_to_ycbcr(image.pixels())?;
    let mut coeffs = vec![0.0; ycc.len()];
    for ch in 0..3 {
        transform_plane(&ycc, &mut coeffs, h, w, 3, ch, true, false);
    }
    Ok(FrequencyMap {
        height: h,
        width: w,
        coeffs,
    })
}

/// Inverse blockwise DCT followed by YCbCr → RGB.
pub fn inverse_frequency_map(map: &FrequencyMap) -> Vec<f64> {
    let mut ycc = vec![0.0; map.coeffs.len()];
    for ch in 0..3 {
        transform_plane(&map.coeffs, &mut ycc, map.height, map.width, 3, ch, false, false);
    }
    ycbcr_to_rgb(&ycc)
}

/// Unchecked batch kernel behind the autodiff frequency op: `src` and `dst`
/// are `[n, h, w, 3]` interleaved buffers.
pub(crate) fn frequency_forward_batch(src: &[f64], dst: &mut [f64], side: usize) {
    let per = side * side * 3;
    let mut ycc = vec![0.0; per];
    for (img, out) in src.chunks_exact(per).zip(dst.chunks_exact_mut(per)) {
        for (p, q) in img.chunks_exact(3).zip(ycc.chunks_exact_mut(3)) {
            q.copy_from_slice(&ycbcr_pixel(p[0], p[1], p[2]));
        }
        for ch in 0..3 {
            transform_plane(&ycc, out, side, side, 3, ch, true, false);
        }
    }
}

/// Adjoint of [`frequency_forward_batch`] (the affine offsets drop out),
/// accumulated into `dst`.
pub(crate) fn frequency_adjoint_batch(grad: &[f64], dst: &mut [f64], side: usize) {
    let per = side * side * 3;
    let mut ycc = vec![0.0; per];
    let m = YCBCR_LINEAR;
    for (g, out) in grad.chunks_exact(per).zip(dst.chunks_exact_mut(per)) {
        for ch in 0..3 {
            transform_plane(g, &mut ycc, side, side, 3, ch, false, false);
        }
        for (q, o) in ycc.chunks_exact(3).zip(out.chunks_exact_mut(3)) {
            for (c, oc) in o.iter_mut().enumerate() {
                *oc += m[0][c] * q[0] + m[1][c] * q[1] + m[2][c] * q[2];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Definitional O(N⁴) orthonormal 2-D DCT-II of one block.
    fn naive_dct(block: &[f64]) -> Vec<f64> {
        let n = BLOCK;
        let pi = std::f64::consts::PI;
        let alpha = |k: usize| {
            if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let mut s = 0.0;
                for x in 0..n {
                    for y in 0..n {
                        s += block[x * n + y]
                            * ((2 * x + 1) as f64 * u as f64 * pi / (2 * n) as f64).cos()
                            * ((2 * y + 1) as f64 * v as f64 * pi / (2 * n) as f64).cos();
                    }
                }
                out[u * n + v] = alpha(u) * alpha(v) * s;
            }
        }
        out
    }

    #[test]
    fn ycbcr_reference_colours() {
        let out = rgb_to_ycbcr(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let expect = [
            1.0,
            0.5,
            0.5,
            0.0,
            0.5,
            0.5,
            0.299,
            0.5 - 0.299 * 0.564,
            0.5 + 0.701 * 0.713,
        ];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ycbcr_rejects_out_of_range() {
        assert!(matches!(
            rgb_to_ycbcr(&[1.2, 0.0, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(rgb_to_ycbcr(&[-0.01, 0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn constant_block_has_only_dc() {
        let c = 0.37;
        let out = block_dct8(&[c; 64], 8, 8).unwrap();
        assert!((out[0] - 8.0 * c).abs() < 1e-12);
        assert!(out[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn matches_naive_dct_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let block: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = block_dct8(&block, 8, 8).unwrap();
            let slow = naive_dct(&block);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9);
            }
            let e_in: f64 = block.iter().map(|v| v * v).sum();
            let e_out: f64 = fast.iter().map(|v| v * v).sum();
            assert!((e_in - e_out).abs() < 1e-9);
        }
    }

    #[test]
    fn non_divisible_plane_is_shape_error() {
        assert!(matches!(block_dct8(&[0.0; 12 * 8], 12, 8), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_gray_map() {
        let img = Image::filled(32, 0.5);
        let map = frequency_map(&img, &FrequencyConfig::default()).unwrap();
        assert_eq!(map.coeffs.len(), 32 * 32 * 3);
        for r in 0..32 {
            for c in 0..32 {
                for ch in 0..3 {
                    let v = map.at(r, c, ch);
                    if r % 8 == 0 && c % 8 == 0 {
                        assert!((v - 4.0).abs() < 1e-12);
                    } else {
                        assert!(v.abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn round_trip_through_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let px: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random::<f64>()).collect();
        let img = Image::new(16, px.clone()).unwrap();
        let map = frequency_map(&img, &FrequencyConfig::default()).unwrap();
        let back = inverse_frequency_map(&map);
        let err = px
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "round trip error {err}");
    }

    #[test]
    fn adjoint_matches_forward_inner_product() {
        // <F x, g> = <x, Fᵀ g> on the linear part.
        let side = 16;
        let n = side * side * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zero = vec![0.0; n];
        let mut fx = vec![0.0; n];
        let mut f0 = vec![0.0; n];
        frequency_forward_batch(&x, &mut fx, side);
        frequency_forward_batch(&zero, &mut f0, side);
        let mut ftg = vec![0.0; n];
        frequency_adjoint_batch(&g, &mut ftg, side);
        let lhs: f64 = fx.iter().zip(&f0).zip(&g).map(|((a, b), c)| (a - b) * c).sum();
        let rhs: f64 = x.iter().zip(&ftg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
