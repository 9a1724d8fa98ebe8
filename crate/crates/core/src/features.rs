//! Classical fingerprint processing: normalization, block orientation,
//! segmentation, binarization, thinning and crossing-number minutiae, plus
//! a quality score in [0, 100].
//!
//! The quality score is a coarse utility proxy (orientation coherence,
//! foreground extent and ridge clarity). It is not NFIQ 2.0 and is only
//! meant to rank prints consistently.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{BinaryMask, GrayImage};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("image has zero variance")]
    ZeroVariance,
    #[error("block size {0} is below the minimum of 8")]
    BlockTooSmall(usize),
    #[error("skeleton is not thin (thinning would remove pixels)")]
    NotThin,
    #[error("mask dimensions {0:?} do not match skeleton {1:?}")]
    Dimensions((usize, usize), (usize, usize)),
}

/// Per-block ridge orientation in [0, pi) with a coherence in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationField {
    pub block: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub angles: Vec<f64>,
    pub coherence: Vec<f64>,
}

impl OrientationField {
    pub fn angle(&self, bx: usize, by: usize) -> f64 {
        self.angles[by * self.grid_w + bx]
    }

    pub fn coherence_at(&self, bx: usize, by: usize) -> f64 {
        self.coherence[by * self.grid_w + bx]
    }

    /// Orientation of the block containing pixel `(x, y)`.
    pub fn angle_at_pixel(&self, x: usize, y: usize) -> f64 {
        self.angle((x / self.block).min(self.grid_w - 1), (y / self.block).min(self.grid_h - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinutiaKind {
    Ending,
    Bifurcation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Minutia {
    pub x: usize,
    pub y: usize,
    /// Radians in [0, 2pi).
    #[serde(rename = "direction_rad")]
    pub direction: f64,
    pub kind: MinutiaKind,
}

/// Spurious-minutiae filtering constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinutiaeConfig {
    /// Minutiae closer than this to the foreground border are dropped.
    pub border_margin: usize,
    /// Minutiae closer than this to an already kept one are merged into it.
    pub merge_distance: f64,
    /// Skeleton pixels followed when estimating direction.
    pub trace_length: usize,
    /// Block size for segmentation.
    pub block: usize,
}

impl Default for MinutiaeConfig {
    fn default() -> Self {
        Self { border_margin: 10, merge_distance: 8.0, trace_length: 10, block: 16 }
    }
}

// ---------------------------------------------------------------------------
// Normalization

/// Mean/variance normalization: `out = m0 + sqrt(v0 / v) * (in - m)`,
/// clamped to [0, 255].
pub fn normalize(image: &GrayImage, target_mean: f64, target_var: f64) -> Result<GrayImage, FeatureError> {
    let mean = image.mean();
    let var = image.variance();
    if var <= 0.0 {
        return Err(FeatureError::ZeroVariance);
    }
    let gain = (target_var / var).sqrt();
    let values: Vec<f64> = image.pixels().iter().map(|&p| target_mean + gain * (p as f64 - mean)).collect();
    Ok(GrayImage::from_f64(image.width(), image.height(), &values).expect("same geometry"))
}

// ---------------------------------------------------------------------------
// Orientation

/// Sobel gradients with replicated borders.
pub fn sobel(image: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (image.width(), image.height());
    let px = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        image.get(x, y) as f64
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            gy[i] = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Least-squares block orientation from Sobel gradients. Angles are ridge
/// directions measured from the +x axis with y pointing down.
pub fn estimate_orientation(image: &GrayImage, block: usize) -> Result<OrientationField, FeatureError> {
    if block < 8 {
        return Err(FeatureError::BlockTooSmall(block));
    }
    let (w, h) = (image.width(), image.height());
    let (gx, gy) = sobel(image);
    let grid_w = w.div_ceil(block);
    let grid_h = h.div_ceil(block);
    let mut sxx = vec![0.0; grid_w * grid_h];
    let mut syy = vec![0.0; grid_w * grid_h];
    let mut sxy = vec![0.0; grid_w * grid_h];
    for y in 0..h {
        let row = (y / block) * grid_w;
        for x in 0..w {
            let b = row + x / block;
            let (a, c) = (gx[y * w + x], gy[y * w + x]);
            sxx[b] += a * a;
            syy[b] += c * c;
            sxy[b] += a * c;
        }
    }
    let mut angles = Vec::with_capacity(grid_w * grid_h);
    let mut coherence = Vec::with_capacity(grid_w * grid_h);
    for b in 0..grid_w * grid_h {
        let (xx, yy, xy) = (sxx[b], syy[b], sxy[b]);
        let denom = xx + yy;
        let theta = (0.5 * (2.0 * xy).atan2(xx - yy) + PI / 2.0).rem_euclid(PI);
        angles.push(if theta >= PI { 0.0 } else { theta });
        let coh = if denom > 0.0 { (((xx - yy).powi(2) + 4.0 * xy * xy).sqrt() / denom).clamp(0.0, 1.0) } else { 0.0 };
        coherence.push(coh);
    }
    Ok(OrientationField { block, grid_w, grid_h, angles, coherence })
}

// ---------------------------------------------------------------------------
// Segmentation

/// Block-level foreground decision before expansion to pixels.
pub fn foreground_blocks(image: &GrayImage, block: usize) -> (usize, usize, Vec<bool>) {
    let (w, h) = (image.width(), image.height());
    let block = block.max(1);
    let grid_w = w.div_ceil(block);
    let grid_h = h.div_ceil(block);
    let global = image.variance();
    let threshold = 0.1 * global;
    let mut grid = vec![false; grid_w * grid_h];
    if global > 0.0 {
        for by in 0..grid_h {
            for bx in 0..grid_w {
                let var = block_variance(image, bx * block, by * block, block);
                grid[by * grid_w + bx] = var > 0.0 && var >= threshold;
            }
        }
    }
    let closed = erode_grid(&dilate_grid(&grid, grid_w, grid_h), grid_w, grid_h);
    (grid_w, grid_h, closed)
}

fn block_variance(image: &GrayImage, x0: usize, y0: usize, block: usize) -> f64 {
    let x1 = (x0 + block).min(image.width());
    let y1 = (y0 + block).min(image.height());
    let mut s = 0.0;
    let mut s2 = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let v = image.get(x, y) as f64;
            s += v;
            s2 += v * v;
        }
    }
    let n = ((x1 - x0) * (y1 - y0)) as f64;
    (s2 / n - (s / n).powi(2)).max(0.0)
}

fn dilate_grid(g: &[bool], w: usize, h: usize) -> Vec<bool> {
    morph_grid(g, w, h, false, |acc, v| acc || v)
}

fn erode_grid(g: &[bool], w: usize, h: usize) -> Vec<bool> {
    // Outside the grid counts as foreground so the frame edge is not eaten.
    morph_grid(g, w, h, true, |acc, v| acc && v)
}

fn morph_grid(g: &[bool], w: usize, h: usize, outside: bool, op: impl Fn(bool, bool) -> bool) -> Vec<bool> {
    let mut out = vec![false; g.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = g[y as usize * w + x as usize];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    let v = if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        outside
                    } else {
                        g[ny as usize * w + nx as usize]
                    };
                    acc = op(acc, v);
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Variance-based foreground mask: a block is foreground when its variance
/// reaches a tenth of the global variance; the block map is then closed
/// with a 3x3 structuring element.
pub fn segment_foreground(image: &GrayImage, block: usize) -> BinaryMask {
    let block = block.max(1);
    let (gw, _, grid) = foreground_blocks(image, block);
    BinaryMask::from_fn(image.width(), image.height(), |x, y| grid[(y / block) * gw + x / block])
}

// ---------------------------------------------------------------------------
// Binarization and thinning

const BINARIZE_RADIUS: usize = 7;

/// Adaptive threshold: ridge iff pixel < (15x15 local mean) - 2.
pub fn binarize(image: &GrayImage) -> BinaryMask {
    let (w, h) = (image.width(), image.height());
    let integral = integral_image(image);
    let r = BINARIZE_RADIUS;
    BinaryMask::from_fn(w, h, |x, y| {
        let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
        let (x1, y1) = ((x + r + 1).min(w), (y + r + 1).min(h));
        let sum = window_sum(&integral, w, x0, y0, x1, y1);
        let count = ((x1 - x0) * (y1 - y0)) as u64;
        // p < sum/count - 2, in integers
        (image.get(x, y) as u64 + 2) * count < sum
    })
}

/// Summed-area table with a zero first row/column, `(w+1) x (h+1)`.
pub(crate) fn integral_image(image: &GrayImage) -> Vec<u64> {
    let (w, h) = (image.width(), image.height());
    let mut t = vec![0u64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            row += image.get(x, y) as u64;
            t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
        }
    }
    t
}

pub(crate) fn window_sum(t: &[u64], w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> u64 {
    let s = w + 1;
    t[y1 * s + x1] + t[y0 * s + x0] - t[y0 * s + x1] - t[y1 * s + x0]
}

/// 8-neighbourhood of `(x, y)` clockwise from north: N, NE, E, SE, S, SW, W, NW.
#[inline]
fn neighbours(m: &[bool], w: usize, h: usize, x: usize, y: usize) -> [bool; 8] {
    let at = |dx: isize, dy: isize| {
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && m[ny as usize * w + nx as usize]
    };
    [at(0, -1), at(1, -1), at(1, 0), at(1, 1), at(0, 1), at(-1, 1), at(-1, 0), at(-1, -1)]
}

/// 0 -> 1 transitions around the cyclic neighbourhood.
fn transitions(n: &[bool; 8]) -> usize {
    (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count()
}

/// Yokoi 8-connectivity number; a pixel is simple iff this equals 1.
fn connectivity_number(n: &[bool; 8]) -> i32 {
    // Counter-clockwise from east: E, NE, N, NW, W, SW, S, SE.
    let ccw = [n[2], n[1], n[0], n[7], n[6], n[5], n[4], n[3]];
    let inv = |i: usize| !ccw[i % 8] as i32;
    [0usize, 2, 4, 6].iter().map(|&k| inv(k) - inv(k) * inv(k + 1) * inv(k + 2)).sum()
}

/// Zhang-Suen thinning. Candidate deletions of each sub-iteration are
/// applied sequentially and only when the pixel is still a simple,
/// non-end point, so every 8-connected component survives.
pub fn thin(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut m = mask.bits().to_vec();
    let mut candidates = Vec::new();
    loop {
        let mut changed = false;
        for sub in 0..2 {
            candidates.clear();
            for y in 0..h {
                for x in 0..w {
                    if !m[y * w + x] {
                        continue;
                    }
                    let n = neighbours(&m, w, h, x, y);
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) || transitions(&n) != 1 {
                        continue;
                    }
                    let [p2, _, p4, _, p6, _, p8, _] = n;
                    let ok = if sub == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        candidates.push((x, y));
                    }
                }
            }
            for &(x, y) in &candidates {
                let n = neighbours(&m, w, h, x, y);
                let b = n.iter().filter(|&&v| v).count();
                if b >= 2 && connectivity_number(&n) == 1 {
                    m[y * w + x] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    BinaryMask::new(w, h, m).expect("same geometry")
}

// ---------------------------------------------------------------------------
// Minutiae

/// Crossing number `1/2 * sum |p_i - p_{i+1}|` over the cyclic neighbourhood.
pub fn crossing_number(skeleton: &BinaryMask, x: usize, y: usize) -> usize {
    let n = neighbours(skeleton.bits(), skeleton.width(), skeleton.height(), x, y);
    (0..8).filter(|&i| n[i] != n[(i + 1) % 8]).count() / 2
}

const OFFSETS: [(isize, isize); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

/// Walks along the skeleton from `start` (entering from `from`) for up to
/// `steps` pixels and returns where it stopped.
fn trace(skel: &BinaryMask, from: (usize, usize), start: (usize, usize), steps: usize) -> (usize, usize) {
    let (w, h) = (skel.width(), skel.height());
    let mut prev = from;
    let mut cur = start;
    let mut visited = vec![from, start];
    for _ in 1..steps {
        let mut next = None;
        for (dx, dy) in OFFSETS {
            let nx = cur.0 as isize + dx;
            let ny = cur.1 as isize + dy;
            if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                continue;
            }
            let cand = (nx as usize, ny as usize);
            if cand == prev || visited.contains(&cand) || !skel.get(cand.0, cand.1) {
                continue;
            }
            // Prefer 4-neighbours so staircase corners are not skipped.
            if next.is_none() || dx == 0 || dy == 0 {
                next = Some(cand);
                if dx == 0 || dy == 0 {
                    break;
                }
            }
        }
        match next {
            Some(n) => {
                prev = cur;
                cur = n;
                visited.push(n);
            }
            None => break,
        }
    }
    cur
}

fn angle_to(from: (usize, usize), to: (usize, usize)) -> f64 {
    (to.1 as f64 - from.1 as f64).atan2(to.0 as f64 - from.0 as f64).rem_euclid(2.0 * PI)
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Crossing-number minutiae before any filtering: CN = 1 endings and
/// CN = 3 bifurcations. Ending directions point from the ridge body to the
/// ending; bifurcation directions point away from the stem into the fork.
pub fn raw_minutiae(skeleton: &BinaryMask, trace_length: usize) -> Vec<Minutia> {
    let (w, h) = (skeleton.width(), skeleton.height());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !skeleton.get(x, y) {
                continue;
            }
            let n = neighbours(skeleton.bits(), w, h, x, y);
            let cn = (0..8).filter(|&i| n[i] != n[(i + 1) % 8]).count() / 2;
            let kind = match cn {
                1 => MinutiaKind::Ending,
                3 => MinutiaKind::Bifurcation,
                _ => continue,
            };
            // one start pixel per run of set neighbours
            let mut starts = Vec::new();
            for i in 0..8 {
                if n[i] && !n[(i + 7) % 8] {
                    let mut best = i;
                    let mut j = i;
                    while n[j % 8] && j < i + 8 {
                        if j % 2 == 0 {
                            best = j % 8;
                            break;
                        }
                        j += 1;
                    }
                    let (dx, dy) = OFFSETS[best];
                    starts.push(((x as isize + dx) as usize, (y as isize + dy) as usize));
                }
            }
            if starts.is_empty() {
                continue;
            }
            let branch_angles: Vec<f64> =
                starts.iter().map(|&s| angle_to((x, y), trace(skeleton, (x, y), s, trace_length))).collect();
            let direction = match kind {
                MinutiaKind::Ending => (branch_angles[0] + PI).rem_euclid(2.0 * PI),
                MinutiaKind::Bifurcation => {
                    let isolation = |i: usize| {
                        branch_angles
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != i)
                            .map(|(_, &b)| circular_distance(branch_angles[i], b))
                            .fold(f64::INFINITY, f64::min)
                    };
                    let stem = (0..branch_angles.len())
                        .max_by(|&a, &b| isolation(a).total_cmp(&isolation(b)))
                        .expect("nonempty");
                    (branch_angles[stem] + PI).rem_euclid(2.0 * PI)
                }
            };
            out.push(Minutia { x, y, direction, kind });
        }
    }
    out
}

/// Crossing-number minutiae with border and proximity filtering.
pub fn extract_minutiae(
    skeleton: &BinaryMask,
    foreground: &BinaryMask,
    config: &MinutiaeConfig,
) -> Result<Vec<Minutia>, FeatureError> {
    let dims = (skeleton.width(), skeleton.height());
    if (foreground.width(), foreground.height()) != dims {
        return Err(FeatureError::Dimensions((foreground.width(), foreground.height()), dims));
    }
    if &thin(skeleton) != skeleton {
        return Err(FeatureError::NotThin);
    }
    let r = config.border_margin as i64;
    let interior = |m: &Minutia| {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r && !foreground.get_signed(m.x as i64 + dx, m.y as i64 + dy) {
                    return false;
                }
            }
        }
        true
    };
    let mut kept: Vec<Minutia> = Vec::new();
    let d2 = config.merge_distance * config.merge_distance;
    for m in raw_minutiae(skeleton, config.trace_length).into_iter().filter(|m| interior(m)) {
        let close = kept.iter().any(|k| {
            let dx = k.x as f64 - m.x as f64;
            let dy = k.y as f64 - m.y as f64;
            dx * dx + dy * dy < d2
        });
        if !close {
            kept.push(m);
        }
    }
    Ok(kept)
}

/// Full extraction on a raw image: segment, binarize inside the
/// foreground, thin, and extract filtered minutiae.
pub fn detect_minutiae(image: &GrayImage, config: &MinutiaeConfig) -> (Vec<Minutia>, BinaryMask) {
    let fg = segment_foreground(image, config.block);
    let ridges = binarize(image).and(&fg);
    let skeleton = thin(&ridges);
    let minutiae = extract_minutiae(&skeleton, &fg, config).expect("thin output is thin and geometry matches");
    (minutiae, fg)
}

// ---------------------------------------------------------------------------
// Quality

/// Components of [`quality_score`], each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityBreakdown {
    pub coherence: f64,
    pub foreground: f64,
    pub contrast: f64,
}

impl QualityBreakdown {
    pub fn score(&self) -> u8 {
        let s = 100.0 * (0.5 * self.coherence + 0.3 * self.foreground + 0.2 * self.contrast);
        s.round().clamp(0.0, 100.0) as u8
    }
}

const QUALITY_BLOCK: usize = 16;

pub fn quality_breakdown(image: &GrayImage) -> QualityBreakdown {
    let (w, h) = (image.width(), image.height());
    let (gw, gh, grid) = foreground_blocks(image, QUALITY_BLOCK);
    let field = estimate_orientation(image, QUALITY_BLOCK).expect("block size is valid");
    let smooth = box3(image);
    let mut coherence = 0.0;
    let mut contrast = 0.0;
    let mut blocks = 0usize;
    let mut fg_pixels = 0usize;
    for by in 0..gh {
        for bx in 0..gw {
            if !grid[by * gw + bx] {
                continue;
            }
            let (x0, y0) = (bx * QUALITY_BLOCK, by * QUALITY_BLOCK);
            let (x1, y1) = ((x0 + QUALITY_BLOCK).min(w), (y0 + QUALITY_BLOCK).min(h));
            fg_pixels += (x1 - x0) * (y1 - y0);
            blocks += 1;
            coherence += field.coherence_at(bx, by);
            let raw = block_variance(image, x0, y0, QUALITY_BLOCK);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = smooth[y * w + x];
                    s += v;
                    s2 += v * v;
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            let sm = (s2 / n - (s / n).powi(2)).max(0.0);
            contrast += if raw > 0.0 { (sm / raw).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    if blocks == 0 {
        return QualityBreakdown { coherence: 0.0, foreground: 0.0, contrast: 0.0 };
    }
    QualityBreakdown {
        coherence: coherence / blocks as f64,
        foreground: fg_pixels as f64 / (w * h) as f64,
        contrast: contrast / blocks as f64,
    }
}

/// Integer quality in [0, 100]:
/// `round(100 * (0.5 coherence + 0.3 foreground fraction + 0.2 contrast))`
/// where contrast is the share of block variance that survives a 3x3 box
/// blur (ridge structure survives, pixel noise does not).
pub fn quality_score(image: &GrayImage) -> u8 {
    quality_breakdown(image).score()
}

fn box3(image: &GrayImage) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += image.get(xx, yy) as f64;
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grating(w: usize, h: usize, angle_deg: f64, period: f64) -> GrayImage {
        let t = angle_deg.to_radians();
        // ridges run along (cos t, sin t): intensity varies along the normal
        let (nx, ny) = (-t.sin(), t.cos());
        GrayImage::from_fn(w, h, |x, y| {
            let d = x as f64 * nx + y as f64 * ny;
            crate::image::quantize(127.5 + 127.5 * (2.0 * PI * d / period).cos())
        })
    }

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(w, h, |x, y| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn normalize_fixed_point_and_errors() {
        let img = GrayImage::from_fn(20, 20, |x, y| if (x + y) % 2 == 0 { 90 } else { 110 });
        // mean 100, variance 100 already
        assert_eq!(normalize(&img, 100.0, 100.0).unwrap(), img);
        assert_eq!(normalize(&GrayImage::filled(4, 4, 7), 100.0, 100.0), Err(FeatureError::ZeroVariance));
    }

    #[test]
    fn normalize_hits_target_mean() {
        let img = grating(64, 64, 20.0, 9.0);
        let n = normalize(&img, 100.0, 100.0).unwrap();
        assert!((n.mean() - 100.0).abs() <= 1.0);
    }

    #[test]
    fn grating_orientation_and_coherence() {
        let img = grating(128, 128, 30.0, 9.0);
        let f = estimate_orientation(&img, 16).unwrap();
        for by in 1..f.grid_h - 1 {
            for bx in 1..f.grid_w - 1 {
                let err = (f.angle(bx, by) - 30f64.to_radians()).abs().to_degrees();
                assert!(err < 3.0, "block ({bx},{by}) err {err}");
                assert!(f.coherence_at(bx, by) > 0.9);
            }
        }
    }

    #[test]
    fn uniform_has_zero_coherence_and_no_foreground() {
        let img = GrayImage::filled(40, 40, 128);
        let f = estimate_orientation(&img, 16).unwrap();
        assert_eq!((f.grid_w, f.grid_h), (3, 3));
        assert!(f.coherence.iter().all(|&c| c == 0.0));
        assert!(segment_foreground(&img, 16).is_empty());
        assert!(binarize(&img).is_empty());
        assert!(estimate_orientation(&img, 4).is_err());
    }

    #[test]
    fn mirrored_grating_reflects_angle() {
        let img = grating(96, 96, 25.0, 8.0);
        let a = estimate_orientation(&img, 16).unwrap();
        let b = estimate_orientation(&crate::image::mirror_h(&img), 16).unwrap();
        for by in 1..5 {
            for bx in 1..5 {
                let expect = (PI - a.angle(bx, by)).rem_euclid(PI);
                let got = b.angle(a.grid_w - 1 - bx, by);
                let d = (got - expect).abs();
                assert!(d.min(PI - d) < 1e-6);
            }
        }
    }

    #[test]
    fn full_frame_grating_is_all_foreground() {
        assert_eq!(segment_foreground(&grating(64, 64, 0.0, 8.0), 16).count(), 64 * 64);
    }

    #[test]
    fn checkerboard_binarizes_by_tile_parity() {
        let img = GrayImage::from_fn(64, 64, |x, y| if (x / 8 + y / 8) % 2 == 0 { 0 } else { 255 });
        let m = binarize(&img);
        let correct = (0..64 * 64).filter(|&i| m.bits()[i] == (img.pixels()[i] == 0)).count();
        assert!(correct as f64 >= 0.99 * 4096.0);
    }

    #[test]
    fn thin_bar_to_centerline() {
        let bar = BinaryMask::from_fn(40, 11, |x, y| (3..37).contains(&x) && (3..8).contains(&y));
        let t = thin(&bar);
        for x in 8..32 {
            let col: Vec<usize> = (0..11).filter(|&y| t.get(x, y)).collect();
            assert_eq!(col, vec![5], "column {x}");
        }
        assert_eq!(thin(&t), t);
    }

    #[test]
    fn thin_keeps_diagonal_and_empty() {
        let diag = BinaryMask::from_fn(10, 10, |x, y| x == y);
        assert_eq!(thin(&diag), diag);
        let empty = BinaryMask::empty(5, 5);
        assert_eq!(thin(&empty), empty);
        let square = BinaryMask::from_fn(4, 4, |x, y| (1..3).contains(&x) && (1..3).contains(&y));
        assert!(!thin(&square).is_empty());
    }

    #[test]
    fn straight_segment_has_two_endings() {
        let seg = mask_from(&["..........", "..######..", ".........."]);
        let raw = raw_minutiae(&seg, 10);
        assert_eq!(raw.len(), 2);
        assert!(raw.iter().all(|m| m.kind == MinutiaKind::Ending));
        // left end points west (pi), right end points east (0)
        let left = raw.iter().find(|m| m.x == 2).unwrap();
        assert!((left.direction - PI).abs() < 1e-9);
        let right = raw.iter().find(|m| m.x == 7).unwrap();
        assert!(right.direction.abs() < 1e-9);
    }

    #[test]
    fn y_junction() {
        let y = mask_from(&[
            "...........",
            ".#.......#.",
            "..#.....#..",
            "...#...#...",
            "....#.#....",
            ".....#.....",
            ".....#.....",
            ".....#.....",
            ".....#.....",
            "...........",
        ]);
        let raw = raw_minutiae(&y, 10);
        let bif: Vec<_> = raw.iter().filter(|m| m.kind == MinutiaKind::Bifurcation).collect();
        let end = raw.iter().filter(|m| m.kind == MinutiaKind::Ending).count();
        assert_eq!((bif.len(), end), (1, 3));
        assert_eq!((bif[0].x, bif[0].y), (5, 5));
        // the stem runs south, so the fork opens north (3pi/2 with y down)
        assert!((bif[0].direction - 1.5 * PI).abs() < 1e-9);
    }

    #[test]
    fn non_thin_input_rejected() {
        let blob = BinaryMask::from_fn(10, 10, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
        assert_eq!(extract_minutiae(&blob, &BinaryMask::full(10, 10), &MinutiaeConfig::default()), Err(FeatureError::NotThin));
    }

    #[test]
    fn border_and_merge_filters() {
        let seg = mask_from(&[
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "............####..............",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
            "..............................",
        ]);
        let fg = BinaryMask::full(30, 24);
        let cfg = MinutiaeConfig::default();
        // the two endings are 3 px apart: merged into one
        assert_eq!(raw_minutiae(&seg, 10).len(), 2);
        assert_eq!(extract_minutiae(&seg, &fg, &cfg).unwrap().len(), 1);
        // with the foreground ending 5 px away they vanish
        let near = BinaryMask::from_fn(30, 24, |x, _| x < 20);
        assert!(extract_minutiae(&seg, &near, &cfg).unwrap().is_empty());
    }

    #[test]
    fn quality_degenerate_cases() {
        assert!(quality_score(&GrayImage::filled(64, 64, 200)) <= 5);
        let q = quality_score(&grating(128, 128, 45.0, 9.0));
        assert!(q > 80, "clean full-frame grating scored {q}");
    }
}
