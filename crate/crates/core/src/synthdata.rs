//! Synthetic "real vs. manipulated" image domains, directory ingestion and
//! adaptation scenario assembly.
//!
//! Real images are smoothed value-noise textures rendered through a
//! per-image palette with additive sensor grain. Every domain has its own
//! capture profile (palette range, texture scale, grain level), so two
//! domains differ in their real images as well as in their forgeries. The
//! four manipulation families each leave a different trace:
//!
//! * `patch_swap`: a resampled central patch from another real image is
//!   alpha-blended in with a raised-cosine border (colour seam plus
//!   interpolation blur).
//! * `local_warp`: a windowed sinusoidal displacement of the centre,
//!   resampled bilinearly (geometric distortion plus interpolation blur).
//! * `region_noise`: band-limited noise added inside a rectangle.
//! * `full_synth`: the whole image is re-rendered with shifted statistics
//!   and a periodic upsampling pattern.
//!
//! Generation is a pure function of its arguments: every sample draws from
//! its own seeded stream, so results do not depend on scheduling.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square RGB image, interleaved row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side * 3 {
            return Err(Error::Shape(format!(
                "{} values do not form a {side}×{side}×3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { side, data })
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self {
            side,
            data: vec![value.clamp(0.0, 1.0); side * side * 3],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.side + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.side, self.side, 3], self.data.clone()).expect("image shape")
    }

    /// SHA-256 over the little-endian pixel bytes.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.side as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    fn sample_bilinear(&self, y: f64, x: f64) -> [f64; 3] {
        let max = (self.side - 1) as f64;
        let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.side - 1), (x0 + 1).min(self.side - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let mut out = [0.0; 3];
        let (a, b, c, d) = (
            self.pixel(y0, x0),
            self.pixel(y0, x1),
            self.pixel(y1, x0),
            self.pixel(y1, x1),
        );
        for ch in 0..3 {
            out[ch] = (1.0 - fy) * ((1.0 - fx) * a[ch] + fx * b[ch])
                + fy * ((1.0 - fx) * c[ch] + fx * d[ch]);
        }
        out
    }

    fn set(&mut self, row: usize, col: usize, px: [f64; 3]) {
        let i = (row * self.side + col) * 3;
        for ch in 0..3 {
            self.data[i + ch] = px[ch].clamp(0.0, 1.0);
        }
    }

    /// Quantises to 8-bit RGB.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.side as u32, self.side as u32, bytes).expect("rgb buffer")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(Error::Domain(format!("label {other} outside {{0, 1}}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: Arc<Image>,
    pub label: Label,
    pub domain_id: String,
}

/// A sample with no label field, so unlabeled pools cannot leak labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub image: Arc<Image>,
    pub domain_id: String,
}

impl LabeledSample {
    pub fn strip_label(&self) -> UnlabeledSample {
        UnlabeledSample {
            image: Arc::clone(&self.image),
            domain_id: self.domain_id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    Labeled(Vec<LabeledSample>),
    Unlabeled(Vec<UnlabeledSample>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Labeled(v) => v.len(),
            Samples::Unlabeled(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_labeled(&self) -> bool {
        matches!(self, Samples::Labeled(_))
    }

    pub fn images(&self) -> Vec<&Arc<Image>> {
        match self {
            Samples::Labeled(v) => v.iter().map(|s| &s.image).collect(),
            Samples::Unlabeled(v) => v.iter().map(|s| &s.image).collect(),
        }
    }

    pub fn labels(&self) -> Option<Vec<Label>> {
        match self {
            Samples::Labeled(v) => Some(v.iter().map(|s| s.label).collect()),
            Samples::Unlabeled(_) => None,
        }
    }

    pub fn stripped(&self) -> Vec<UnlabeledSample> {
        match self {
            Samples::Labeled(v) => v.iter().map(LabeledSample::strip_label).collect(),
            Samples::Unlabeled(v) => v.clone(),
        }
    }
}

/// One domain's training (D′) and testing (D″) splits.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub train: Samples,
    pub test: Samples,
}

impl DomainDataset {
    pub fn new(domain_id: impl Into<String>, train: Samples, test: Samples) -> Result<Self> {
        if train.is_labeled() != test.is_labeled() {
            return Err(Error::Config(
                "train and test splits must agree on labeling".into(),
            ));
        }
        Ok(Self {
            domain_id: domain_id.into(),
            train,
            test,
        })
    }

    pub fn labeled(&self) -> bool {
        self.train.is_labeled()
    }

    pub fn n(&self) -> usize {
        self.train.len() + self.test.len()
    }

    /// Drops every label, keeping the split membership.
    pub fn unlabeled_view(&self) -> DomainDataset {
        DomainDataset {
            domain_id: self.domain_id.clone(),
            train: Samples::Unlabeled(self.train.stripped()),
            test: Samples::Unlabeled(self.test.stripped()),
        }
    }

    /// Checks `train ∩ test = ∅` by content hash.
    pub fn verify_disjoint(&self) -> Result<()> {
        let train: HashSet<[u8; 32]> = self.train.images().iter().map(|i| i.content_hash()).collect();
        for img in self.test.images() {
            if train.contains(&img.content_hash()) {
                return Err(Error::Size(format!(
                    "domain {}: a test image also appears in the training split",
                    self.domain_id
                )));
            }
        }
        Ok(())
    }

    pub fn class_counts(samples: &Samples) -> Option<(usize, usize)> {
        samples.labels().map(|l| {
            let fake = l.iter().filter(|&&x| x == Label::Fake).count();
            (l.len() - fake, fake)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipKind {
    PatchSwap,
    LocalWarp,
    RegionNoise,
    FullSynth,
}

impl ManipKind {
    pub const ALL: [ManipKind; 4] = [
        ManipKind::PatchSwap,
        ManipKind::LocalWarp,
        ManipKind::RegionNoise,
        ManipKind::FullSynth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ManipKind::PatchSwap => "patch_swap",
            ManipKind::LocalWarp => "local_warp",
            ManipKind::RegionNoise => "region_noise",
            ManipKind::FullSynth => "full_synth",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            ManipKind::PatchSwap => 1,
            ManipKind::LocalWarp => 2,
            ManipKind::RegionNoise => 3,
            ManipKind::FullSynth => 4,
        }
    }
}

impl fmt::Display for ManipKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ManipKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ManipKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown manipulation kind `{s}`")))
    }
}

/// Rendering statistics for real images. Every domain draws scene content
/// from the same palette distribution; domains differ in their capture
/// profile (per-channel colour gain and sensor grain).
#[derive(Clone, Copy, Debug)]
struct CaptureProfile {
    hue_center: f64,
    hue_spread: f64,
    saturation: (f64, f64),
    value: (f64, f64),
    /// Value-noise lattice cells across the image at the coarsest octave.
    cells: usize,
    /// Per-channel colour gain of the capture device.
    gain: [f64; 3],
    /// Spread of the per-image white-balance error, as a log-gain range.
    balance_jitter: f64,
    grain: f64,
    /// Upper bound of the per-image blend towards a blurred copy, applied
    /// after grain (lens softness and resampling of the capture device).
    defocus: f64,
}

const SCENE: CaptureProfile = CaptureProfile {
    hue_center: 0.05,
    hue_spread: 0.5,
    saturation: (0.3, 0.7),
    value: (0.35, 0.85),
    cells: 4,
    gain: [1.0, 1.0, 1.0],
    balance_jitter: 0.0,
    grain: 0.04,
    defocus: 0.0,
};

fn profile(kind: ManipKind) -> CaptureProfile {
    let (gain, balance_jitter, grain, defocus) = match kind {
        ManipKind::PatchSwap => ([1.0, 1.0, 1.0], 0.0, 0.07, 0.0),
        ManipKind::LocalWarp => ([0.8, 0.95, 1.2], 0.35, 0.06, 0.8),
        ManipKind::RegionNoise => ([1.1, 1.0, 0.85], 0.2, 0.035, 0.0),
        ManipKind::FullSynth => ([0.95, 1.1, 0.95], 0.1, 0.05, 0.0),
    };
    CaptureProfile {
        gain,
        balance_jitter,
        grain,
        defocus,
        ..SCENE
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Value noise in `[0, 1]` with smoothstep interpolation on a `cells`-cell
/// lattice.
fn value_noise(rng: &mut ChaCha8Rng, side: usize, cells: usize) -> Vec<f64> {
    let cells = cells.max(1);
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random()).collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        let y = (r as f64 + 0.5) / side as f64 * cells as f64;
        let (i, fy) = ((y.floor() as usize).min(cells - 1), 0.0);
        let fy = smooth(y - i as f64 + fy);
        for c in 0..side {
            let x = (c as f64 + 0.5) / side as f64 * cells as f64;
            let j = (x.floor() as usize).min(cells - 1);
            let fx = smooth(x - j as f64);
            out[r * side + c] = (1.0 - fy) * ((1.0 - fx) * at(i, j) + fx * at(i, j + 1))
                + fy * ((1.0 - fx) * at(i + 1, j) + fx * at(i + 1, j + 1));
        }
    }
    out
}

fn fractal_noise(rng: &mut ChaCha8Rng, side: usize, cells: usize) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    let mut total = 0.0;
    for (octave, weight) in [(1usize, 1.0), (2, 0.5), (4, 0.25)] {
        let layer = value_noise(rng, side, cells * octave);
        for (o, v) in out.iter_mut().zip(layer) {
            *o += weight * v;
        }
        total += weight;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn render_real(rng: &mut ChaCha8Rng, side: usize, p: &CaptureProfile, grain_scale: f64) -> Image {
    let hue = p.hue_center + rng.random_range(-p.hue_spread..p.hue_spread);
    let mut palette = [[0.0; 3]; 3];
    for (k, col) in palette.iter_mut().enumerate() {
        let h = hue + 0.08 * k as f64 * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let s = rng.random_range(p.saturation.0..p.saturation.1);
        let v = rng.random_range(p.value.0..p.value.1);
        *col = hsv_to_rgb(h, s, v);
    }
    let base = fractal_noise(rng, side, p.cells);
    let tint = value_noise(rng, side, p.cells.max(2) / 2 + 1);
    let mut gain = p.gain;
    if p.balance_jitter > 0.0 {
        for g in &mut gain {
            *g *= rng.random_range(-p.balance_jitter..p.balance_jitter).exp();
        }
    }
    let grain = Normal::new(0.0, p.grain * grain_scale).expect("grain sigma");
    let mut data = vec![0.0; side * side * 3];
    for i in 0..side * side {
        let t = base[i];
        let u = 0.5 * tint[i];
        for ch in 0..3 {
            let c = (1.0 - t) * palette[0][ch] + t * palette[1][ch];
            let c = (1.0 - u) * c + u * palette[2][ch];
            data[i * 3 + ch] = (c * gain[ch] + grain.sample(rng)).clamp(0.0, 1.0);
        }
    }
    let img = Image { side, data };
    if p.defocus > 0.0 {
        let d = rng.random_range(0.0..p.defocus);
        let soft = box_blur(&img);
        let data = img.data.iter().zip(&soft.data).map(|(a, b)| (1.0 - d) * a + d * b).collect();
        return Image { side, data };
    }
    img
}

/// Axis-aligned manipulated region `[top, top + height) × [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }

    /// Distance (in pixels, ≥ 0.5) from the pixel centre to the nearest edge.
    fn inset(&self, row: usize, col: usize) -> f64 {
        let dy = (row - self.top).min(self.top + self.height - 1 - row) as f64 + 0.5;
        let dx = (col - self.left).min(self.left + self.width - 1 - col) as f64 + 0.5;
        dy.min(dx)
    }
}

fn central_region(rng: &mut ChaCha8Rng, side: usize) -> Region {
    let size = side / 2;
    let jitter = (side / 16) as i64;
    let off = |rng: &mut ChaCha8Rng| {
        let base = ((side - size) / 2) as i64;
        (base + rng.random_range(-jitter..=jitter)) as usize
    };
    Region {
        top: off(rng),
        left: off(rng),
        height: size,
        width: size,
    }
}

/// Raised-cosine ramp from 0 at the region edge to 1 at `border` pixels in.
fn raised_cosine(inset: f64, border: f64) -> f64 {
    if inset >= border {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * inset / border).cos()
    }
}

const PATCH_BORDER: f64 = 2.0;

fn patch_swap(rng: &mut ChaCha8Rng, target: &Image, donor: &Image) -> (Image, Region) {
    let side = target.side;
    let region = central_region(rng, side);
    let zoom = rng.random_range(0.8..0.92);
    let (cy, cx) = (
        region.top as f64 + region.height as f64 / 2.0,
        region.left as f64 + region.width as f64 / 2.0,
    );
    let shift = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let donor = box_blur(donor);
    let mut out = target.clone();
    for r in region.top..region.top + region.height {
        for c in region.left..region.left + region.width {
            let m = raised_cosine(region.inset(r, c), PATCH_BORDER);
            let src = donor.sample_bilinear(
                cy + (r as f64 - cy) * zoom + shift.0,
                cx + (c as f64 - cx) * zoom + shift.1,
            );
            let dst = target.pixel(r, c);
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = m * src[ch] + (1.0 - m) * dst[ch];
            }
            out.set(r, c, px);
        }
    }
    (out, region)
}

fn local_warp(rng: &mut ChaCha8Rng, src: &Image) -> (Image, Region) {
    let side = src.side;
    let region = central_region(rng, side);
    let amp = rng.random_range(1.2..2.2);
    let wavelength = rng.random_range(0.5..0.9) * region.height as f64;
    let (p1, p2) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let half = region.height as f64 / 2.0;
    let smooth = box_blur(src);
    let mut out = src.clone();
    for r in region.top..region.top + region.height {
        for c in region.left..region.left + region.width {
            let w = raised_cosine(region.inset(r, c), half);
            let (ry, rx) = ((r - region.top) as f64, (c - region.left) as f64);
            let dy = amp * w * (std::f64::consts::TAU * rx / wavelength + p1).sin();
            let dx = amp * w * (std::f64::consts::TAU * ry / wavelength + p2).sin();
            out.set(r, c, smooth.sample_bilinear(r as f64 + dy, c as f64 + dx));
        }
    }
    (out, region)
}

/// 3×3 box filter with edge clamping.
fn box_blur(src: &Image) -> Image {
    let side = src.side;
    let mut out = src.clone();
    for r in 0..side {
        for c in 0..side {
            let mut acc = [0.0; 3];
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = (r as i64 + dr).clamp(0, side as i64 - 1) as usize;
                    let cc = (c as i64 + dc).clamp(0, side as i64 - 1) as usize;
                    let p = src.pixel(rr, cc);
                    for ch in 0..3 {
                        acc[ch] += p[ch] / 9.0;
                    }
                }
            }
            out.set(r, c, acc);
        }
    }
    out
}

fn region_noise(rng: &mut ChaCha8Rng, src: &Image) -> (Image, Region) {
    let side = src.side;
    let h = rng.random_range(side / 4..=side / 2);
    let w = rng.random_range(side / 4..=side / 2);
    let region = Region {
        top: rng.random_range(side / 8..=side - side / 8 - h),
        left: rng.random_range(side / 8..=side - side / 8 - w),
        height: h,
        width: w,
    };
    let cells = (side / 4).max(2);
    let amp = rng.random_range(0.08..0.14);
    let bands: Vec<Vec<f64>> = (0..3).map(|_| value_noise(rng, side, cells)).collect();
    let mut out = src.clone();
    for r in region.top..region.top + region.height {
        for c in region.left..region.left + region.width {
            let i = r * side + c;
            let p = src.pixel(r, c);
            let mut px = [0.0; 3];
            for ch in 0..3 {
                let n = bands[ch][i] - 0.5;
                // Push away from the clamp bounds so every pixel changes.
                let mut v = p[ch] + amp * n;
                if !(0.0..=1.0).contains(&v) {
                    v = p[ch] - amp * n;
                }
                px[ch] = v;
            }
            out.set(r, c, px);
        }
    }
    (out, region)
}

fn full_synth(rng: &mut ChaCha8Rng, side: usize, p: &CaptureProfile) -> (Image, Region) {
    let shifted = CaptureProfile {
        saturation: (p.saturation.0 + 0.1, (p.saturation.1 + 0.15).min(1.0)),
        cells: p.cells + 1,
        ..*p
    };
    let mut img = render_real(rng, side, &shifted, 0.4);
    let amp = rng.random_range(0.015..0.03);
    for r in 0..side {
        for c in 0..side {
            let s = if (r + c) % 2 == 0 { amp } else { -amp };
            let px = img.pixel(r, c);
            img.set(r, c, [px[0] + s, px[1] + s, px[2] + s]);
        }
    }
    (
        img,
        Region {
            top: 0,
            left: 0,
            height: side,
            width: side,
        },
    )
}

fn stream(seed: u64, kind: ManipKind, role: u64, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(kind.stream_id().to_le_bytes());
    h.update(role.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

const ROLE_REAL: u64 = 1;
const ROLE_FAKE_BASE: u64 = 2;
const ROLE_DONOR: u64 = 3;
const ROLE_MANIP: u64 = 4;
/// A fake sample together with the pristine image it was derived from.
#[derive(Clone, Debug)]
pub struct ManipulatedPair {
    pub pristine: Image,
    pub fake: Image,
    pub region: Region,
}

pub const SUPPORTED_SIDES: [usize; 3] = [32, 64, 224];

fn check_side(side: usize) -> Result<()> {
    if SUPPORTED_SIDES.contains(&side) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "image side {side} not in {SUPPORTED_SIDES:?}"
        )))
    }
}

/// Deterministically renders the `index`-th fake of a domain.
pub fn generate_pair(kind: ManipKind, seed: u64, index: usize, side: usize) -> Result<ManipulatedPair> {
    check_side(side)?;
    let p = profile(kind);
    let pristine = render_real(&mut stream(seed, kind, ROLE_FAKE_BASE, index), side, &p, 1.0);
    let mut rng = stream(seed, kind, ROLE_MANIP, index);
    let (fake, region) = match kind {
        ManipKind::PatchSwap => {
            let donor = render_real(&mut stream(seed, kind, ROLE_DONOR, index), side, &p, 1.0);
            patch_swap(&mut rng, &pristine, &donor)
        }
        ManipKind::LocalWarp => local_warp(&mut rng, &pristine),
        ManipKind::RegionNoise => region_noise(&mut rng, &pristine),
        ManipKind::FullSynth => full_synth(&mut rng, side, &p),
    };
    Ok(ManipulatedPair {
        pristine,
        fake,
        region,
    })
}

pub fn generate_real(kind: ManipKind, seed: u64, index: usize, side: usize) -> Result<Image> {
    check_side(side)?;
    Ok(render_real(&mut stream(seed, kind, ROLE_REAL, index), side, &profile(kind), 1.0))
}

/// Generates a labeled domain; all samples land in the training split
/// (use [`split_domain`] to carve out a test split). Reals come first, then
/// fakes, each ordered by index.
pub fn generate_domain(
    kind: ManipKind,
    seed: u64,
    n_real: usize,
    n_fake: usize,
    side: usize,
) -> Result<DomainDataset> {
    const MIN_PER_CLASS: usize = 4;
    if n_real < MIN_PER_CLASS || n_fake < MIN_PER_CLASS {
        return Err(Error::Size(format!(
            "need at least {MIN_PER_CLASS} real and fake samples, got {n_real}/{n_fake}"
        )));
    }
    check_side(side)?;
    let domain_id = kind.name().to_string();
    let reals: Vec<Image> = (0..n_real)
        .into_par_iter()
        .map(|i| generate_real(kind, seed, i, side))
        .collect::<Result<_>>()?;
    let fakes: Vec<Image> = (0..n_fake)
        .into_par_iter()
        .map(|i| generate_pair(kind, seed, i, side).map(|p| p.fake))
        .collect::<Result<_>>()?;
    let samples = reals
        .into_iter()
        .map(|img| (img, Label::Real))
        .chain(fakes.into_iter().map(|img| (img, Label::Fake)))
        .map(|(img, label)| LabeledSample {
            image: Arc::new(img),
            label,
            domain_id: domain_id.clone(),
        })
        .collect();
    DomainDataset::new(domain_id, Samples::Labeled(samples), Samples::Labeled(Vec::new()))
}

/// Re-splits all samples of `d` into train/test, stratified per class when
/// labeled. Deterministic for a fixed seed.
pub fn split_domain(d: &DomainDataset, train_fraction: f64, seed: u64) -> Result<DomainDataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = |n: usize| (n as f64 * train_fraction).round() as usize;
    let (train, test) = match (&d.train, &d.test) {
        (Samples::Labeled(a), Samples::Labeled(b)) => {
            let all: Vec<&LabeledSample> = a.iter().chain(b).collect();
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for class in [Label::Real, Label::Fake] {
                let mut members: Vec<&LabeledSample> =
                    all.iter().copied().filter(|s| s.label == class).collect();
                members.shuffle(&mut rng);
                let k = take(members.len());
                train.extend(members[..k].iter().map(|s| (*s).clone()));
                test.extend(members[k..].iter().map(|s| (*s).clone()));
            }
            (Samples::Labeled(train), Samples::Labeled(test))
        }
        (Samples::Unlabeled(a), Samples::Unlabeled(b)) => {
            let mut all: Vec<UnlabeledSample> = a.iter().chain(b).cloned().collect();
            all.shuffle(&mut rng);
            let k = take(all.len());
            let test = all.split_off(k);
            (Samples::Unlabeled(all), Samples::Unlabeled(test))
        }
        _ => return Err(Error::Config("mixed labeled/unlabeled splits".into())),
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Size(format!(
            "fraction {train_fraction} of {} samples leaves an empty split",
            d.n()
        )));
    }
    DomainDataset::new(d.domain_id.clone(), train, test)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    pub side: usize,
    /// Downsample the majority class to the minority count (labeled only).
    pub balance_classes: bool,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            side: 32,
            balance_classes: false,
            seed: 0,
        }
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Ingestion {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Ingestion {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        let path = entry.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn decode(path: &Path, side: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = image::imageops::resize(
        &img.to_rgb8(),
        side as u32,
        side as u32,
        image::imageops::FilterType::Triangle,
    );
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(side, data)
}

/// Reads `<root>/real/*`, `<root>/fake/*` (labeled) or `<root>/*`
/// (unlabeled) into the training split of a new dataset.
pub fn load_dataset_dir(path: &Path, labeled: bool, opts: &IngestOptions) -> Result<DomainDataset> {
    check_side(opts.side)?;
    if !path.is_dir() {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: "not a directory".into(),
        });
    }
    let domain_id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    if !labeled {
        let samples = list_images(path)?
            .iter()
            .map(|p| {
                decode(p, opts.side).map(|img| UnlabeledSample {
                    image: Arc::new(img),
                    domain_id: domain_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return DomainDataset::new(domain_id, Samples::Unlabeled(samples), Samples::Unlabeled(Vec::new()));
    }

    let mut subdirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in &subdirs {
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned());
        if !matches!(name.as_deref(), Some("real") | Some("fake")) {
            return Err(Error::Ingestion {
                path: d.clone(),
                reason: "unknown subdirectory (expected real/ or fake/)".into(),
            });
        }
    }
    let mut per_class = Vec::new();
    for (name, label) in [("real", Label::Real), ("fake", Label::Fake)] {
        let dir = path.join(name);
        let files = if dir.is_dir() { list_images(&dir)? } else { Vec::new() };
        let samples = files
            .iter()
            .map(|p| {
                decode(p, opts.side).map(|img| LabeledSample {
                    image: Arc::new(img),
                    label,
                    domain_id: domain_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        per_class.push(samples);
    }
    if opts.balance_classes {
        let keep = per_class.iter().map(Vec::len).min().unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for class in per_class.iter_mut() {
            class.shuffle(&mut rng);
            class.truncate(keep);
        }
    }
    let samples: Vec<LabeledSample> = per_class.into_iter().flatten().collect();
    DomainDataset::new(domain_id, Samples::Labeled(samples), Samples::Labeled(Vec::new()))
}

/// Writes a dataset in the ingestion layout (all splits combined). Labeled
/// datasets go to `real/` and `fake/`; unlabeled ones are written flat.
pub fn export_domain(d: &DomainDataset, root: &Path) -> Result<usize> {
    let mut written = 0;
    let save = |img: &Image, dir: PathBuf, idx: usize| -> Result<()> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{idx:05}.png"));
        img.to_rgb8().save(&path).map_err(|e| Error::Ingestion {
            path: path.clone(),
            reason: e.to_string(),
        })
    };
    for split in [&d.train, &d.test] {
        match split {
            Samples::Labeled(v) => {
                for s in v {
                    let sub = if s.label == Label::Real { "real" } else { "fake" };
                    save(&s.image, root.join(sub), written)?;
                    written += 1;
                }
            }
            Samples::Unlabeled(v) => {
                for s in v {
                    save(&s.image, root.to_path_buf(), written)?;
                    written += 1;
                }
            }
        }
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    O2O,
    O2M,
}

/// A labeled source domain plus one or more target domains. The targets
/// keep their ground truth for evaluation only; training code sees the
/// label-free `target_pool`.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub source: DomainDataset,
    pub targets: Vec<DomainDataset>,
    pub kind: ScenarioKind,
    target_pool: Vec<UnlabeledSample>,
}

impl Scenario {
    /// Concatenated, label-stripped target training splits.
    pub fn target_pool(&self) -> &[UnlabeledSample] {
        &self.target_pool
    }
}

pub fn make_scenario(source: DomainDataset, targets: Vec<DomainDataset>) -> Result<Scenario> {
    if !source.labeled() {
        return Err(Error::Config(format!(
            "source domain {} must be labeled",
            source.domain_id
        )));
    }
    if targets.is_empty() {
        return Err(Error::Config("at least one target domain is required".into()));
    }
    for t in &targets {
        if t.train.is_empty() {
            return Err(Error::Size(format!(
                "target domain {} has an empty training split",
                t.domain_id
            )));
        }
    }
    let kind = if targets.len() == 1 {
        ScenarioKind::O2O
    } else {
        ScenarioKind::O2M
    };
    let target_pool = targets.iter().flat_map(|t| t.train.stripped()).collect();
    Ok(Scenario {
        source,
        targets,
        kind,
        target_pool,
    })
}
