//! Procedural fingerprints and the three alteration types.
//!
//! Masters are grown by repeatedly filtering white noise with oriented
//! Gabor kernels tuned to a zero-pole orientation model. Alterations return
//! the altered image together with a mask of exactly the pixels they
//! changed, which serves as localization ground truth.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{estimate_orientation, integral_image, segment_foreground, window_sum};
use crate::image::{quantize, save_image, save_mask, BinaryMask, GrayImage, ImageError, Rect};

pub const GENERATOR_VERSION: &str = "altprint-synth/1";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("orientation undefined at singular point ({x}, {y})")]
    AtSingularity { x: f64, y: f64 },
    #[error("alteration region {0} lies outside the {1}x{2} image")]
    RegionOutOfBounds(String, usize, usize),
    #[error("alteration region overlaps foreground by {0:.3}, need at least 0.25")]
    InsufficientForeground(f64),
    #[error("magnitude {0} outside (0, 1]")]
    Magnitude(f64),
    #[error("alteration changed no pixels")]
    EmptyAlteration,
    #[error("invalid dataset request: {0}")]
    InvalidRequest(String),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Parameters of one master print.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub cores: Vec<(f64, f64)>,
    pub deltas: Vec<(f64, f64)>,
    /// Pixels per ridge-valley cycle.
    pub ridge_period: f64,
    pub noise_sigma: f64,
    /// Far-field ridge direction in radians.
    pub base_angle: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 512,
            height: 512,
            cores: Vec::new(),
            deltas: Vec::new(),
            ridge_period: 9.0,
            noise_sigma: 4.0,
            base_angle: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width < 32 || self.height < 32 {
            return Err(SynthError::InvalidSpec(format!("canvas {}x{} below 32x32", self.width, self.height)));
        }
        if self.cores.len() > 2 || self.deltas.len() > 2 {
            return Err(SynthError::InvalidSpec("at most two cores and two deltas".into()));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for &(x, y) in self.cores.iter().chain(&self.deltas) {
            if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
                return Err(SynthError::InvalidSpec(format!("singular point ({x}, {y}) outside image")));
            }
        }
        if !(6.0..=14.0).contains(&self.ridge_period) {
            return Err(SynthError::InvalidSpec(format!("ridge period {} outside [6, 14]", self.ridge_period)));
        }
        if !(self.noise_sigma >= 0.0) || !self.base_angle.is_finite() {
            return Err(SynthError::InvalidSpec("noise sigma and base angle must be finite, sigma >= 0".into()));
        }
        Ok(())
    }

    /// Random arch, loop or whorl layout on a `width x height` canvas.
    pub fn random(seed: u64, width: usize, height: usize, period: (f64, f64), noise_sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width as f64, height as f64);
        let jitter = |rng: &mut ChaCha8Rng, v: f64, s: f64| v + rng.random_range(-s..s);
        let (cores, deltas) = match rng.random_range(0..10) {
            0..=1 => (vec![], vec![]),
            2..=7 => {
                let side = if rng.random::<bool>() { 0.28 } else { 0.72 };
                (
                    vec![(jitter(&mut rng, 0.5, 0.06) * w, jitter(&mut rng, 0.40, 0.05) * h)],
                    vec![(jitter(&mut rng, side, 0.05) * w, jitter(&mut rng, 0.72, 0.05) * h)],
                )
            }
            _ => (
                vec![
                    (jitter(&mut rng, 0.46, 0.03) * w, jitter(&mut rng, 0.44, 0.03) * h),
                    (jitter(&mut rng, 0.54, 0.03) * w, jitter(&mut rng, 0.52, 0.03) * h),
                ],
                vec![
                    (jitter(&mut rng, 0.25, 0.04) * w, jitter(&mut rng, 0.75, 0.04) * h),
                    (jitter(&mut rng, 0.75, 0.04) * w, jitter(&mut rng, 0.75, 0.04) * h),
                ],
            ),
        };
        let ridge_period =
            if period.1 > period.0 { rng.random_range(period.0..period.1) } else { period.0 };
        Self {
            seed: rng.random(),
            width,
            height,
            cores,
            deltas,
            ridge_period,
            noise_sigma,
            base_angle: rng.random_range(-0.25..0.25),
        }
    }
}

// ---------------------------------------------------------------------------
// Orientation model

/// Zero-pole ridge orientation in [0, pi):
/// `base + 1/2 sum_cores atan2(y - yc, x - xc) - 1/2 sum_deltas atan2(y - yd, x - xd)`.
pub fn orientation_from_singularities(
    cores: &[(f64, f64)],
    deltas: &[(f64, f64)],
    base_angle: f64,
    x: f64,
    y: f64,
) -> Result<f64, SynthError> {
    if cores.iter().chain(deltas).any(|&(sx, sy)| sx == x && sy == y) {
        return Err(SynthError::AtSingularity { x, y });
    }
    Ok(zero_pole(cores, deltas, base_angle, x, y))
}

fn zero_pole(cores: &[(f64, f64)], deltas: &[(f64, f64)], base: f64, x: f64, y: f64) -> f64 {
    let mut t = base;
    for &(cx, cy) in cores {
        t += 0.5 * (y - cy).atan2(x - cx);
    }
    for &(dx, dy) in deltas {
        t -= 0.5 * (y - dy).atan2(x - dx);
    }
    let t = t.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

// ---------------------------------------------------------------------------
// Ridge growth

const ORIENTATION_BINS: usize = 32;
const GROWTH_PASSES: usize = 4;

struct Kernel {
    radius: usize,
    /// Row length of `taps`: kernel width rounded up to a multiple of 4, zero-filled.
    stride: usize,
    taps: Vec<f64>,
}

/// Zero-mean oriented Gabor kernel: cosine across the ridges, anisotropic
/// Gaussian envelope elongated along them.
fn gabor_kernel(theta: f64, period: f64) -> Kernel {
    let sigma_n = 0.45 * period;
    let sigma_t = 0.6 * period;
    let radius = (2.2 * sigma_t).ceil() as isize;
    let (nx, ny) = (-theta.sin(), theta.cos());
    let size = (2 * radius + 1) as usize;
    let mut env = Vec::with_capacity(size * size);
    let mut wave = Vec::with_capacity(size * size);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (dx, dy) = (dx as f64, dy as f64);
            let across = dx * nx + dy * ny;
            let along = dx * ny - dy * nx;
            let e = (-0.5 * (across * across / (sigma_n * sigma_n) + along * along / (sigma_t * sigma_t))).exp();
            env.push(e);
            wave.push((2.0 * PI * across / period).cos());
        }
    }
    let env_sum: f64 = env.iter().sum();
    let dc: f64 = env.iter().zip(&wave).map(|(e, c)| e * c).sum::<f64>() / env_sum;
    let taps: Vec<f64> = env.iter().zip(&wave).map(|(e, c)| e * (c - dc)).collect();
    let norm: f64 = taps.iter().map(|t| t.abs()).sum();
    let stride = size.div_ceil(4) * 4;
    let mut padded = vec![0.0; size * stride];
    for (row, src) in padded.chunks_exact_mut(stride).zip(taps.chunks_exact(size)) {
        for (d, t) in row.iter_mut().zip(src) {
            *d = t / norm;
        }
    }
    Kernel { radius: radius as usize, stride, taps: padded }
}

fn orientation_bin(theta: f64) -> usize {
    ((theta.rem_euclid(PI) / PI * ORIENTATION_BINS as f64).round() as usize) % ORIENTATION_BINS
}

fn period_key(period: f64) -> i64 {
    (period * 4.0).round() as i64
}

/// Grows a ridge field in roughly [-1, 1] (positive = ridge) by filtering
/// noise `GROWTH_PASSES` times with kernels selected per pixel.
fn grow_ridges(w: usize, h: usize, theta: &[f64], period: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut index: HashMap<(usize, i64), usize> = HashMap::new();
    let mut kernels: Vec<Kernel> = Vec::new();
    let which: Vec<usize> = theta
        .iter()
        .zip(period)
        .map(|(&t, &p)| {
            let k = (orientation_bin(t), period_key(p));
            *index.entry(k).or_insert_with(|| {
                kernels.push(gabor_kernel(k.0 as f64 * PI / ORIENTATION_BINS as f64, k.1 as f64 / 4.0));
                kernels.len() - 1
            })
        })
        .collect();
    let mut field: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut next = vec![0.0; w * h];
    // zero margin so every kernel row reads a full stride without clipping
    let m = kernels.iter().map(|k| k.radius).max().unwrap_or(0);
    let pw = w + 2 * m + 4;
    let mut padded = vec![0.0; pw * (h + 2 * m)];
    for pass in 0..GROWTH_PASSES {
        for (y, row) in field.chunks_exact(w).enumerate() {
            padded[(y + m) * pw + m..][..w].copy_from_slice(row);
        }
        for y in 0..h {
            for x in 0..w {
                let k = &kernels[which[y * w + x]];
                let base = (y + m - k.radius) * pw + x + m - k.radius;
                let mut acc = 0.0;
                for (ky, taps) in k.taps.chunks_exact(k.stride).enumerate() {
                    acc += dot(&padded[base + ky * pw..][..k.stride], taps);
                }
                next[y * w + x] = acc;
            }
        }
        let std = (next.iter().map(|v| v * v).sum::<f64>() / next.len() as f64).sqrt().max(1e-12);
        let gain = if pass + 1 == GROWTH_PASSES { 2.0 } else { 1.5 };
        for (f, n) in field.iter_mut().zip(&next) {
            *f = (gain * n / std).tanh();
        }
    }
    field
}

/// Dot product of slices whose length is a multiple of 4, over four
/// interleaved accumulators so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    for (x, y) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    /// Soft foreground weight: 1 inside, 0 outside, smooth across the rim.
    fn weight(&self, x: f64, y: f64) -> f64 {
        let r = (((x - self.cx) / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2)).sqrt();
        let t = ((1.06 - r) / 0.12).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }
}

fn ridge_intensity(v: f64, weight: f64) -> f64 {
    255.0 - weight * 127.5 * (1.0 + v)
}

/// Renders a master print. Pure function of `spec`.
pub fn generate_master(spec: &SyntheticSpec) -> Result<GrayImage, SynthError> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ellipse = Ellipse {
        cx: w as f64 * (0.5 + rng.random_range(-0.02..0.02)),
        cy: h as f64 * (0.5 + rng.random_range(-0.02..0.02)),
        ax: w as f64 * rng.random_range(0.36..0.42),
        ay: h as f64 * rng.random_range(0.42..0.47),
    };
    let theta: Vec<f64> = (0..w * h)
        .map(|i| zero_pole(&spec.cores, &spec.deltas, spec.base_angle, (i % w) as f64, (i / w) as f64))
        .collect();
    let period = vec![spec.ridge_period; w * h];
    let field = grow_ridges(w, h, &theta, &period, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("finite sigma");
    let values: Vec<f64> = field
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let base = ridge_intensity(v, ellipse.weight((i % w) as f64, (i / w) as f64));
            if spec.noise_sigma > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            }
        })
        .collect();
    Ok(GrayImage::from_f64(w, h, &values)?)
}

// ---------------------------------------------------------------------------
// Alterations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlterationKind {
    Obliteration,
    Distortion,
    Imitation,
}

impl AlterationKind {
    pub const ALL: [AlterationKind; 3] =
        [AlterationKind::Obliteration, AlterationKind::Distortion, AlterationKind::Imitation];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Rect(Rect),
    /// Polyline of `(x, y)` points swept by a disc of diameter `width`.
    Stroke { points: Vec<(f64, f64)>, width: f64 },
}

impl Region {
    pub fn bounding_rect(&self) -> Option<(i64, i64, i64, i64)> {
        match self {
            Region::Rect(r) => Some((r.x as i64, r.y as i64, (r.x + r.w) as i64, (r.y + r.h) as i64)),
            Region::Stroke { points, width } => {
                if points.is_empty() {
                    return None;
                }
                let r = width / 2.0;
                let x0 = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - r;
                let y0 = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - r;
                let x1 = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + r;
                let y1 = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + r;
                Some((x0.floor() as i64, y0.floor() as i64, x1.ceil() as i64 + 1, y1.ceil() as i64 + 1))
            }
        }
    }

    /// Pixel mask of the region; errors if any part falls outside the image.
    pub fn rasterize(&self, width: usize, height: usize) -> Result<BinaryMask, SynthError> {
        let out_of_bounds = || SynthError::RegionOutOfBounds(format!("{self:?}"), width, height);
        match self {
            Region::Rect(r) => {
                if !r.fits_in(width, height) {
                    return Err(out_of_bounds());
                }
                Ok(BinaryMask::from_fn(width, height, |x, y| r.contains(x, y)))
            }
            Region::Stroke { points, width: sw } => {
                let inside =
                    |&(x, y): &(f64, f64)| x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64;
                if points.is_empty() || !(*sw > 0.0) || !points.iter().all(inside) {
                    return Err(out_of_bounds());
                }
                let r2 = (sw / 2.0).powi(2);
                let segs: Vec<((f64, f64), (f64, f64))> = if points.len() == 1 {
                    vec![(points[0], points[0])]
                } else {
                    points.windows(2).map(|p| (p[0], p[1])).collect()
                };
                Ok(BinaryMask::from_fn(width, height, |x, y| {
                    segs.iter().any(|&(a, b)| segment_distance2((x as f64, y as f64), a, b) <= r2)
                }))
            }
        }
    }
}

fn segment_distance2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    dx * dx + dy * dy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlterationSpec {
    pub kind: AlterationKind,
    pub region: Region,
    /// Severity in (0, 1].
    pub magnitude: f64,
    pub seed: u64,
}

/// Applies an alteration. The returned mask is exactly the set of pixels
/// whose value changed.
pub fn apply_alteration(image: &GrayImage, alt: &AlterationSpec) -> Result<(GrayImage, BinaryMask), SynthError> {
    if !(alt.magnitude > 0.0 && alt.magnitude <= 1.0) {
        return Err(SynthError::Magnitude(alt.magnitude));
    }
    let (w, h) = (image.width(), image.height());
    let region = alt.region.rasterize(w, h)?;
    let fg = segment_foreground(image, 16);
    let area = region.count();
    let overlap = region.and(&fg).count() as f64 / area.max(1) as f64;
    if area == 0 || overlap < 0.25 {
        return Err(SynthError::InsufficientForeground(overlap));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(alt.seed);
    let bbox = bbox_of(&region);
    let replacement = match alt.kind {
        AlterationKind::Obliteration => obliterate(image, &region, bbox, alt.magnitude, &mut rng),
        AlterationKind::Distortion => distort(image, &region, bbox, alt.magnitude, &mut rng),
        AlterationKind::Imitation => imitate(image, &region, bbox, alt.magnitude, &mut rng),
    };
    let mut out = image.clone();
    for (i, v) in replacement {
        out.pixels_mut()[i] = v;
    }
    let mask = BinaryMask::from_fn(w, h, |x, y| out.get(x, y) != image.get(x, y));
    if mask.is_empty() {
        return Err(SynthError::EmptyAlteration);
    }
    Ok((out, mask))
}

/// Inclusive-exclusive pixel bounds `(x0, y0, x1, y1)` of a nonempty mask.
fn bbox_of(mask: &BinaryMask) -> (usize, usize, usize, usize) {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0, y0, x1, y1)
}

/// Smooth random field on the bbox: bilinear upsampling of a coarse grid
/// of uniform values in [-1, 1].
fn value_noise(bw: usize, bh: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = (bw as f64 / cell).ceil() as usize + 2;
    let gh = (bh as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(bw * bh);
    for y in 0..bh {
        for x in 0..bw {
            let (gx, gy) = (x as f64 / cell, y as f64 / cell);
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let (fx, fy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
            let g = |a: usize, b: usize| grid[b * gw + a];
            let top = g(ix, iy) * (1.0 - fx) + g(ix + 1, iy) * fx;
            let bot = g(ix, iy + 1) * (1.0 - fx) + g(ix + 1, iy + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Chamfer distance (in pixels, 8-connected) from each region pixel to the
/// nearest pixel outside the region, on the bbox.
fn inner_distance(region: &BinaryMask, bbox: (usize, usize, usize, usize)) -> Vec<f64> {
    let (x0, y0, x1, y1) = bbox;
    let (bw, bh) = (x1 - x0 + 2, y1 - y0 + 2);
    // one-pixel frame of "outside" around the bbox
    let inside = |x: usize, y: usize| {
        x >= 1 && y >= 1 && x <= bw - 2 && y <= bh - 2 && region.get(x0 + x - 1, y0 + y - 1)
    };
    let big = 1e9;
    let mut d: Vec<f64> = (0..bw * bh).map(|i| if inside(i % bw, i / bw) { big } else { 0.0 }).collect();
    let (a, b) = (1.0, std::f64::consts::SQRT_2);
    for y in 1..bh - 1 {
        for x in 1..bw - 1 {
            let i = y * bw + x;
            let m = d[i].min(d[i - 1] + a).min(d[i - bw] + a).min(d[i - bw - 1] + b).min(d[i - bw + 1] + b);
            d[i] = m;
        }
    }
    for y in (1..bh - 1).rev() {
        for x in (1..bw - 1).rev() {
            let i = y * bw + x;
            let m = d[i].min(d[i + 1] + a).min(d[i + bw] + a).min(d[i + bw + 1] + b).min(d[i + bw - 1] + b);
            d[i] = m;
        }
    }
    let (iw, ih) = (x1 - x0, y1 - y0);
    (0..iw * ih).map(|i| d[(i / iw + 1) * bw + i % iw + 1]).collect()
}

/// Scar tissue: mottled mid-gray blotch with speckle and dark cut strokes
/// over the most affected part of the region.
fn obliterate(
    image: &GrayImage,
    region: &BinaryMask,
    bbox: (usize, usize, usize, usize),
    magnitude: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, u8)> {
    let w = image.width();
    let (x0, y0, x1, y1) = bbox;
    let (bw, bh) = (x1 - x0, y1 - y0);
    let dist = inner_distance(region, bbox);
    let shape = value_noise(bw, bh, 14.0, rng);
    let mottle = value_noise(bw, bh, 5.0, rng);
    let speckle = Normal::new(0.0, 22.0).expect("valid");
    // Fraction of the region that is hit, by score rank.
    let coverage = (0.35 + 0.65 * magnitude).min(1.0);
    let mut scores: Vec<(f64, usize)> = Vec::new();
    for i in 0..bw * bh {
        if region.get(x0 + i % bw, y0 + i / bw) {
            scores.push((shape[i] + 0.08 * dist[i].min(12.0), i));
        }
    }
    scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let hit = ((scores.len() as f64 * coverage).ceil() as usize).min(scores.len());
    let mut selected = vec![false; bw * bh];
    for &(_, i) in &scores[..hit] {
        selected[i] = true;
    }
    // scar strokes across the bbox
    let n_strokes = 1 + (magnitude * 3.0).round() as usize;
    let strokes: Vec<((f64, f64), (f64, f64), f64)> = (0..n_strokes)
        .map(|_| {
            let a = (rng.random_range(0.0..bw as f64), rng.random_range(0.0..bh as f64));
            let b = (rng.random_range(0.0..bw as f64), rng.random_range(0.0..bh as f64));
            (a, b, rng.random_range(1.0..2.5))
        })
        .collect();
    let alpha = 0.6 + 0.4 * magnitude;
    let mut out = Vec::with_capacity(hit);
    for i in 0..bw * bh {
        if !selected[i] {
            continue;
        }
        let (lx, ly) = ((i % bw) as f64, (i / bw) as f64);
        let mut scar = 175.0 + 45.0 * mottle[i] + speckle.sample(rng);
        for &(a, b, r) in &strokes {
            if segment_distance2((lx, ly), a, b) <= r * r {
                scar = 45.0 + 20.0 * mottle[i];
            }
        }
        // soften the blotch edge over a few pixels
        let edge = (dist[i] / 3.0).clamp(0.35, 1.0);
        let a = alpha * edge;
        let p = (y0 + i / bw) * w + x0 + i % bw;
        let orig = image.pixels()[p] as f64;
        out.push((p, quantize((1.0 - a) * orig + a * scar)));
    }
    out
}

/// Rotated grafts: the region is cut into one tile (two by two above
/// magnitude 0.5), each refilled from another part of the print under its
/// own rotation, with dark seams along every cut.
fn distort(
    image: &GrayImage,
    region: &BinaryMask,
    bbox: (usize, usize, usize, usize),
    magnitude: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, u8)> {
    let (w, h) = (image.width(), image.height());
    let (x0, y0, x1, y1) = bbox;
    let (bw, bh) = (x1 - x0, y1 - y0);
    let tiles = if magnitude >= 0.5 && bw >= 16 && bh >= 16 { 2 } else { 1 };
    let (tw, th) = (bw as f64 / tiles as f64, bh as f64 / tiles as f64);
    let (w_f, h_f) = (w as f64, h as f64);
    struct Graft {
        cx: f64,
        cy: f64,
        sx: f64,
        sy: f64,
        cos: f64,
        sin: f64,
    }
    let mut grafts = Vec::with_capacity(tiles * tiles);
    for ty in 0..tiles {
        for tx in 0..tiles {
            let cx = x0 as f64 + (tx as f64 + 0.5) * tw;
            let cy = y0 as f64 + (ty as f64 + 0.5) * th;
            let dir = rng.random_range(0.0..2.0 * PI);
            let len = bw.max(bh) as f64 * rng.random_range(0.35..0.7);
            let sx = (cx + len * dir.cos()).clamp(tw / 2.0, w_f - tw / 2.0);
            let sy = (cy + len * dir.sin()).clamp(th / 2.0, h_f - th / 2.0);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let angle = sign * (25.0 + 65.0 * magnitude).to_radians();
            grafts.push(Graft { cx, cy, sx, sy, cos: angle.cos(), sin: angle.sin() });
        }
    }
    let dist = inner_distance(region, bbox);
    let seam_noise = Normal::new(0.0, 12.0).expect("valid");
    let mut out = Vec::new();
    for i in 0..bw * bh {
        let (lx, ly) = (i % bw, i / bw);
        let (x, y) = (x0 + lx, y0 + ly);
        if !region.get(x, y) {
            continue;
        }
        let tx = ((lx as f64 / tw) as usize).min(tiles - 1);
        let ty = ((ly as f64 / th) as usize).min(tiles - 1);
        let g = &grafts[ty * tiles + tx];
        let (dx, dy) = (x as f64 - g.cx, y as f64 - g.cy);
        let src_x = g.sx + g.cos * dx - g.sin * dy;
        let src_y = g.sy + g.sin * dx + g.cos * dy;
        let mut v = image.sample_bilinear(src_x, src_y).unwrap_or(255.0);
        let cut = (1..tiles).any(|k| {
            (lx as f64 + 0.5 - k as f64 * tw).abs() <= 1.0 || (ly as f64 + 0.5 - k as f64 * th).abs() <= 1.0
        });
        if dist[i] <= 1.5 || cut {
            v = 0.5 * v + 0.5 * (70.0 + seam_noise.sample(rng));
        }
        out.push((y * w + x, quantize(v)));
    }
    out
}

fn blend_angles(a: f64, b: f64, t: f64) -> f64 {
    let c = (1.0 - t) * (2.0 * a).cos() + t * (2.0 * b).cos();
    let s = (1.0 - t) * (2.0 * a).sin() + t * (2.0 * b).sin();
    (0.5 * s.atan2(c)).rem_euclid(PI)
}

/// Per-pixel host orientation by interpolating block estimates in the
/// doubled-angle domain.
fn host_orientation(x: f64, y: f64, field: &crate::features::OrientationField) -> f64 {
    let b = field.block as f64;
    let gx = (x / b - 0.5).clamp(0.0, (field.grid_w - 1) as f64);
    let gy = (y / b - 0.5).clamp(0.0, (field.grid_h - 1) as f64);
    let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
    let (fx, fy) = (gx - ix as f64, gy - iy as f64);
    let (jx, jy) = ((ix + 1).min(field.grid_w - 1), (iy + 1).min(field.grid_h - 1));
    let mut c = 0.0;
    let mut s = 0.0;
    for (bx, by, wgt) in [(ix, iy, (1.0 - fx) * (1.0 - fy)), (jx, iy, fx * (1.0 - fy)), (ix, jy, (1.0 - fx) * fy), (jx, jy, fx * fy)] {
        let t = field.angle(bx, by);
        let k = wgt * field.coherence_at(bx, by).max(1e-3);
        c += k * (2.0 * t).cos();
        s += k * (2.0 * t).sin();
    }
    (0.5 * s.atan2(c)).rem_euclid(PI)
}

/// Mean-crossing period estimate along the ridge normal through `(x, y)`.
fn profile_period(image: &GrayImage, x: f64, y: f64, theta: f64) -> Option<f64> {
    let (nx, ny) = (-theta.sin(), theta.cos());
    let samples: Vec<f64> =
        (-32..=32).filter_map(|t| image.sample_bilinear(x + t as f64 * nx, y + t as f64 * ny)).collect();
    if samples.len() < 48 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let crossings = samples.windows(2).filter(|p| (p[0] - mean) * (p[1] - mean) < 0.0).count();
    (crossings >= 4).then(|| 2.0 * (samples.len() - 1) as f64 / crossings as f64)
}

/// Natural-looking graft: the region is regrown with a foreign orientation
/// field and ridge period; within the feather band both fields blend back
/// to the host's so ridge flow stays continuous at the seam.
fn imitate(
    image: &GrayImage,
    region: &BinaryMask,
    bbox: (usize, usize, usize, usize),
    magnitude: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, u8)> {
    let (w, h) = (image.width(), image.height());
    let (x0, y0, x1, y1) = bbox;
    let field = estimate_orientation(image, 16).expect("block 16 is valid");

    // host period from profiles around the region centre
    let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
    let mut periods: Vec<f64> = [(0.0, 0.0), (-0.3, -0.3), (0.3, -0.3), (-0.3, 0.3), (0.3, 0.3)]
        .iter()
        .filter_map(|&(fx, fy)| {
            let px = cx + fx * (x1 - x0) as f64;
            let py = cy + fy * (y1 - y0) as f64;
            profile_period(image, px, py, host_orientation(px, py, &field))
        })
        .filter(|p| (5.0..=16.0).contains(p))
        .collect();
    periods.sort_by(f64::total_cmp);
    let host_period = periods.get(periods.len() / 2).copied().unwrap_or(9.0);
    let stretch = 1.25 + 0.25 * magnitude * rng.random::<f64>() + 0.1 * magnitude;
    let foreign_period =
        (if rng.random::<bool>() { host_period * stretch.min(1.5) } else { host_period / stretch.min(1.5) })
            .clamp(5.0, 16.0);
    let foreign = SyntheticSpec::random(rng.random(), w, h, (host_period, host_period), 0.0);
    let twist = rng.random_range(-1.0..1.0) * (0.3 + 0.6 * magnitude);

    // work window: bbox plus a margin for the kernel support
    let margin = 24usize;
    let (wx0, wy0) = (x0.saturating_sub(margin), y0.saturating_sub(margin));
    let (wx1, wy1) = ((x1 + margin).min(w), (y1 + margin).min(h));
    let (ww, wh) = (wx1 - wx0, wy1 - wy0);
    let dist = inner_distance(region, bbox);
    let feather = 8.0;
    let bw = x1 - x0;
    let in_bbox_dist = |x: usize, y: usize| -> f64 {
        if x >= x0 && x < x1 && y >= y0 && y < y1 && region.get(x, y) {
            dist[(y - y0) * bw + (x - x0)]
        } else {
            0.0
        }
    };
    let mut theta = Vec::with_capacity(ww * wh);
    let mut period = Vec::with_capacity(ww * wh);
    for y in wy0..wy1 {
        for x in wx0..wx1 {
            let t = (in_bbox_dist(x, y) / feather).clamp(0.0, 1.0);
            let host = host_orientation(x as f64, y as f64, &field);
            let other = zero_pole(&foreign.cores, &foreign.deltas, foreign.base_angle + twist, x as f64, y as f64);
            theta.push(blend_angles(host, other, t));
            period.push(host_period + t * (foreign_period - host_period));
        }
    }
    let texture = grow_ridges(ww, wh, &theta, &period, rng);

    // local ridge envelope of the host, from mean darkness
    let integral = integral_image(image);
    let r = (host_period.round() as usize).max(4);
    let noise = Normal::new(0.0, 4.0).expect("valid");
    let mut out = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if !region.get(x, y) {
                continue;
            }
            let (ax, ay) = (x.saturating_sub(r), y.saturating_sub(r));
            let (bx, by) = ((x + r + 1).min(w), (y + r + 1).min(h));
            let n = ((bx - ax) * (by - ay)) as f64;
            let darkness = 255.0 - window_sum(&integral, w, ax, ay, bx, by) as f64 / n;
            let envelope = (darkness / 127.5).clamp(0.0, 1.0);
            let v = texture[(y - wy0) * ww + (x - wx0)];
            let grown = ridge_intensity(v, envelope) + noise.sample(rng);
            let beta = (in_bbox_dist(x, y) / 3.0).clamp(0.0, 1.0);
            let orig = image.get(x, y) as f64;
            out.push((y * w + x, quantize(beta * grown + (1.0 - beta) * orig)));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Valid,
    Altered,
}

impl Label {
    /// Class index used by the classifiers.
    pub fn index(self) -> usize {
        match self {
            Label::Valid => 0,
            Label::Altered => 1,
        }
    }
}

/// Proportions of each alteration kind; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlterationMix {
    pub obliteration: f64,
    pub distortion: f64,
    pub imitation: f64,
}

impl Default for AlterationMix {
    fn default() -> Self {
        Self { obliteration: 1.0 / 3.0, distortion: 1.0 / 3.0, imitation: 1.0 / 3.0 }
    }
}

impl AlterationMix {
    /// Largest-remainder apportionment of `n` samples, in kind order.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let p = [self.obliteration, self.distortion, self.imitation];
        let raw: Vec<f64> = p.iter().map(|q| q * n as f64).collect();
        let mut c: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut rest = n - c.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            c[i] += 1;
            rest -= 1;
        }
        [c[0], c[1], c[2]]
    }
}

/// Everything `build_dataset` needs; serialized into the manifest so the
/// magnitude calibration travels with the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetRequest {
    pub n_valid: usize,
    pub n_altered: usize,
    pub seed: u64,
    pub mix: AlterationMix,
    pub width: usize,
    pub height: usize,
    pub ridge_period: (f64, f64),
    pub noise_sigma: f64,
    pub magnitude: (f64, f64),
    /// Alteration region side as a fraction of the canvas side.
    pub region_scale: (f64, f64),
    /// Folds recorded in the manifest (clamped to the class counts).
    pub folds: usize,
}

impl Default for DatasetRequest {
    fn default() -> Self {
        Self {
            n_valid: 10,
            n_altered: 10,
            seed: 0,
            mix: AlterationMix::default(),
            width: 512,
            height: 512,
            ridge_period: (8.0, 10.0),
            noise_sigma: 4.0,
            magnitude: (0.5, 1.0),
            region_scale: (0.3, 0.45),
            folds: 5,
        }
    }
}

impl DatasetRequest {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidRequest(m.to_string()));
        if self.n_valid == 0 || self.n_altered == 0 {
            return bad("counts must be positive");
        }
        let m = &self.mix;
        if [m.obliteration, m.distortion, m.imitation].iter().any(|p| !(*p >= 0.0))
            || (m.obliteration + m.distortion + m.imitation - 1.0).abs() > 1e-6
        {
            return bad("alteration mix must be non-negative and sum to 1");
        }
        if !(self.magnitude.0 > 0.0 && self.magnitude.0 <= self.magnitude.1 && self.magnitude.1 <= 1.0) {
            return bad("magnitude range must lie in (0, 1]");
        }
        if !(self.region_scale.0 > 0.0 && self.region_scale.0 <= self.region_scale.1 && self.region_scale.1 < 0.8) {
            return bad("region scale must lie in (0, 0.8)");
        }
        if !(6.0 <= self.ridge_period.0 && self.ridge_period.0 <= self.ridge_period.1 && self.ridge_period.1 <= 14.0) {
            return bad("ridge period range must lie in [6, 14]");
        }
        if self.width < 64 || self.height < 64 {
            return bad("canvas must be at least 64x64");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub label: Label,
    pub mask_path: Option<String>,
    pub subject_id: u64,
    pub fold_id: usize,
    #[serde(default)]
    pub alteration: Option<AlterationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub generator: String,
    pub request: DatasetRequest,
    /// How minutiae are obtained for patch extraction.
    pub minutiae_source: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Reads a manifest; returns it with the directory its paths are
    /// relative to.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf), SynthError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SynthError::Io { path: path.display().to_string(), source: e })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

struct Sample {
    image: GrayImage,
    mask: Option<BinaryMask>,
    alteration: Option<AlterationSpec>,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn make_valid(req: &DatasetRequest, index: u64) -> Result<Sample, SynthError> {
    let mut rng = sample_rng(req.seed, index);
    let spec = SyntheticSpec::random(rng.random(), req.width, req.height, req.ridge_period, req.noise_sigma);
    Ok(Sample { image: generate_master(&spec)?, mask: None, alteration: None })
}

fn make_altered(req: &DatasetRequest, index: u64, kind: AlterationKind) -> Result<Sample, SynthError> {
    let mut rng = sample_rng(req.seed, index);
    let spec = SyntheticSpec::random(rng.random(), req.width, req.height, req.ridge_period, req.noise_sigma);
    let master = generate_master(&spec)?;
    let (w, h) = (req.width as f64, req.height as f64);
    let mut last_err = None;
    for _ in 0..32 {
        let magnitude = if req.magnitude.1 > req.magnitude.0 {
            rng.random_range(req.magnitude.0..=req.magnitude.1)
        } else {
            req.magnitude.0
        };
        let rw = (w * rng.random_range(req.region_scale.0..=req.region_scale.1)).round().max(8.0);
        let rh = (h * rng.random_range(req.region_scale.0..=req.region_scale.1)).round().max(8.0);
        // centre inside the inner part of the print
        let cx = w * (0.5 + rng.random_range(-0.2..0.2));
        let cy = h * (0.5 + rng.random_range(-0.2..0.2));
        let x = (cx - rw / 2.0).clamp(0.0, w - rw) as usize;
        let y = (cy - rh / 2.0).clamp(0.0, h - rh) as usize;
        let region = if kind == AlterationKind::Obliteration && rng.random_range(0..4) == 0 {
            // long scar
            let a = (x as f64 + 2.0, y as f64 + rh * rng.random_range(0.1..0.9));
            let b = (x as f64 + rw - 2.0, y as f64 + rh * rng.random_range(0.1..0.9));
            Region::Stroke { points: vec![a, ((a.0 + b.0) / 2.0, y as f64 + rh / 2.0), b], width: (rh * 0.35).max(6.0) }
        } else {
            Region::Rect(Rect::new(x, y, rw as usize, rh as usize))
        };
        let alt = AlterationSpec { kind, region, magnitude, seed: rng.random() };
        match apply_alteration(&master, &alt) {
            Ok((image, mask)) => return Ok(Sample { image, mask: Some(mask), alteration: Some(alt) }),
            Err(e @ (SynthError::InsufficientForeground(_) | SynthError::EmptyAlteration)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(SynthError::EmptyAlteration))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |e| SynthError::Io { path: path.display().to_string(), source: e }
}

/// Generates `n_valid` masters and `n_altered` altered prints (each from
/// its own subject) under `out_dir`, writing PGM images and masks and
/// `manifest.json`. Samples are generated in parallel from per-index RNG
/// streams, so the output does not depend on the thread count.
pub fn build_dataset(request: &DatasetRequest, out_dir: impl AsRef<Path>) -> Result<DatasetManifest, SynthError> {
    request.validate()?;
    let out_dir = out_dir.as_ref();
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    fs::create_dir_all(&masks_dir).map_err(io_err(&masks_dir))?;

    let counts = request.mix.counts(request.n_altered);
    let mut kinds: Vec<AlterationKind> =
        AlterationKind::ALL.iter().zip(counts).flat_map(|(&k, c)| std::iter::repeat_n(k, c)).collect();
    // deterministic interleave so kinds are spread over indices
    let mut order_rng = sample_rng(request.seed, u64::MAX);
    for i in (1..kinds.len()).rev() {
        let j = order_rng.random_range(0..=i);
        kinds.swap(i, j);
    }

    let n_valid = request.n_valid;
    let jobs: Vec<(usize, Option<AlterationKind>)> =
        (0..n_valid).map(|i| (i, None)).chain(kinds.iter().enumerate().map(|(i, &k)| (n_valid + i, Some(k)))).collect();
    let samples: Vec<Result<Sample, SynthError>> = jobs
        .par_iter()
        .map(|&(index, kind)| match kind {
            None => make_valid(request, index as u64),
            Some(k) => make_altered(request, index as u64, k),
        })
        .collect();

    let mut entries = Vec::with_capacity(jobs.len());
    for (&(index, kind), sample) in jobs.iter().zip(samples) {
        let sample = sample?;
        let (label, stem) = match kind {
            None => (Label::Valid, format!("v{index:05}")),
            Some(_) => (Label::Altered, format!("a{index:05}")),
        };
        let image_path = format!("images/{stem}.pgm");
        save_image(&sample.image, out_dir.join(&image_path))?;
        let mask_path = match &sample.mask {
            Some(m) => {
                let p = format!("masks/{stem}.pgm");
                save_mask(m, out_dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            image_path,
            label,
            mask_path,
            subject_id: index as u64,
            fold_id: 0,
            alteration: sample.alteration,
        });
    }

    let mut manifest = DatasetManifest {
        entries,
        seed: request.seed,
        generator: GENERATOR_VERSION.to_string(),
        request: request.clone(),
        minutiae_source: "crossing number on the thinned, locally binarized raw image".to_string(),
    };
    let k = request.folds.clamp(2, request.n_valid.min(request.n_altered).max(2));
    if request.n_valid.min(request.n_altered) >= 2 {
        let split = crate::eval::make_folds(&manifest, k, request.seed, crate::eval::FoldGrouping::Subject)
            .map_err(|e| SynthError::InvalidRequest(e.to_string()))?;
        for (entry, f) in manifest.entries.iter_mut().zip(&split.assignment) {
            entry.fold_id = *f;
        }
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(io_err(&path))?;
    Ok(manifest)
}
