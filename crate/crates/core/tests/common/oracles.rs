//! Independent brute-force implementations used as test oracles.

use std::f64::consts::PI;

use altprint_core::image::{quantize, BinaryMask, GrayImage};
use altprint_core::localizer::PatchRect;
use altprint_core::synth::{DatasetManifest, DatasetRequest, Label, ManifestEntry};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Every candidate threshold: all distinct scores, descending, between the
/// two infinite sentinels.
pub fn thresholds(valid: &[f64], altered: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = valid.iter().chain(altered).copied().collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    let mut all = vec![f64::INFINITY];
    all.extend(t);
    all.push(f64::NEG_INFINITY);
    all
}

/// Fraction of `scores` at or above `t`.
pub fn rate_at(scores: &[f64], t: f64) -> f64 {
    scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64
}

/// `(threshold, fdr, tdr)` at every candidate threshold.
pub fn roc_oracle(valid: &[f64], altered: &[f64]) -> Vec<(f64, f64, f64)> {
    thresholds(valid, altered).into_iter().map(|t| (t, rate_at(valid, t), rate_at(altered, t))).collect()
}

/// `(tdr, fdr, threshold)` of the operating point with the largest FDR not
/// above `target`, preferring the higher TDR among equal FDRs.
pub fn tdr_at_fdr_oracle(valid: &[f64], altered: &[f64], target: f64) -> (f64, f64, f64) {
    let mut best: Option<(f64, f64, f64)> = None;
    for t in thresholds(valid, altered) {
        let (fdr, tdr) = (rate_at(valid, t), rate_at(altered, t));
        if fdr > target {
            continue;
        }
        let better = match best {
            None => true,
            Some((bt, bf, _)) => fdr > bf || (fdr == bf && tdr > bt),
        };
        if better {
            best = Some((tdr, fdr, t));
        }
    }
    best.expect("the +inf sentinel has FDR 0")
}

/// Where the piecewise-linear (FDR, FNR) path crosses FDR = FNR, found by
/// solving each segment for its intersection with the diagonal.
pub fn eer_oracle(points: &[(f64, f64)]) -> f64 {
    for seg in points.windows(2) {
        let ((f0, t0), (f1, t1)) = (seg[0], seg[1]);
        let (n0, n1) = (1.0 - t0, 1.0 - t1);
        let (g0, g1) = (f0 - n0, f1 - n1);
        if g0 == 0.0 {
            return f0;
        }
        if g0 < 0.0 && g1 >= 0.0 {
            let s = g0 / (g0 - g1);
            return f0 + s * (f1 - f0);
        }
    }
    points.last().map(|p| p.0).unwrap_or(0.5)
}

/// A random two-class score instance with at most 500 scores; half of the
/// instances are coarsely quantized so ties are common.
pub fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nv = rng.random_range(1..=250);
    let na = rng.random_range(1..=250);
    let quantized = rng.random_bool(0.5);
    let shift = rng.random_range(0.0..0.5);
    let mut draw = |bias: f64| {
        let v: f64 = (rng.random::<f64>() + bias).min(1.0);
        if quantized {
            (v * 16.0).floor() / 16.0
        } else {
            v
        }
    };
    let valid = (0..nv).map(|_| draw(0.0)).collect();
    let altered = (0..na).map(|_| draw(shift)).collect();
    (valid, altered)
}

/// Overlap by visiting every pixel of the rectangle.
pub fn label_patch_oracle(rect: PatchRect, roi: &BinaryMask) -> (Label, f64) {
    let mut hits = 0usize;
    for dy in 0..rect.h as i64 {
        for dx in 0..rect.w as i64 {
            if roi.get_signed(rect.x + dx, rect.y + dy) {
                hits += 1;
            }
        }
    }
    let fraction = hits as f64 / (rect.w * rect.h) as f64;
    (if fraction > 0.5 { Label::Altered } else { Label::Valid }, fraction)
}

/// A random rectangle (possibly hanging off the image) and a random mask
/// made of a few filled rectangles and discs.
pub fn random_rect_and_mask(rng: &mut ChaCha8Rng) -> (PatchRect, BinaryMask) {
    let (w, h) = (rng.random_range(8..80), rng.random_range(8..80));
    let mut shapes = Vec::new();
    for _ in 0..rng.random_range(0..4) {
        let disc = rng.random_bool(0.5);
        let cx = rng.random_range(0..w) as f64;
        let cy = rng.random_range(0..h) as f64;
        let r = rng.random_range(2.0..30.0);
        shapes.push((disc, cx, cy, r));
    }
    let mask = BinaryMask::from_fn(w, h, |x, y| {
        shapes.iter().any(|&(disc, cx, cy, r)| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if disc {
                dx * dx + dy * dy <= r * r
            } else {
                dx.abs() <= r && dy.abs() <= r / 2.0
            }
        })
    });
    let side = rng.random_range(2..40);
    let rect = PatchRect {
        x: rng.random_range(-(side as i64)..w as i64 + 4),
        y: rng.random_range(-(side as i64)..h as i64 + 4),
        w: side,
        h: if rng.random_bool(0.8) { side } else { rng.random_range(2..40) },
    };
    (rect, mask)
}

/// A manifest without files: `n_valid` + `n_altered` entries, with
/// `per_subject` consecutive entries of one class sharing a subject id.
pub fn mock_manifest(n_valid: usize, n_altered: usize, per_subject: usize) -> DatasetManifest {
    let mut entries = Vec::with_capacity(n_valid + n_altered);
    for (label, n, offset) in [(Label::Valid, n_valid, 0u64), (Label::Altered, n_altered, 1 << 32)] {
        for i in 0..n {
            entries.push(ManifestEntry {
                image_path: format!("{}_{i}.pgm", if label == Label::Valid { "v" } else { "a" }),
                label,
                mask_path: None,
                subject_id: offset + (i / per_subject.max(1)) as u64,
                fold_id: 0,
                alteration: None,
            });
        }
    }
    DatasetManifest {
        entries,
        seed: 0,
        generator: "mock".into(),
        request: DatasetRequest::default(),
        minutiae_source: "none".into(),
    }
}

/// Noiseless sinusoidal grating whose ridges run at `angle_deg` from the
/// x axis (image coordinates, y down).
pub fn grating(w: usize, h: usize, angle_deg: f64, period: f64) -> GrayImage {
    let t = angle_deg.to_radians();
    let (nx, ny) = (-t.sin(), t.cos());
    GrayImage::from_fn(w, h, |x, y| {
        let d = x as f64 * nx + y as f64 * ny;
        quantize(127.5 + 127.5 * (2.0 * PI * d / period).cos())
    })
}

/// Distance between two undirected orientations, in degrees.
pub fn orientation_error_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d).to_degrees()
}

/// Turns of an orientation field (period pi) around a circle, by summing
/// wrapped increments over `samples` points.
pub fn winding_turns(field: impl Fn(f64, f64) -> f64, cx: f64, cy: f64, radius: f64, samples: usize) -> f64 {
    let at = |k: usize| {
        let a = 2.0 * PI * k as f64 / samples as f64;
        field(cx + radius * a.cos(), cy + radius * a.sin())
    };
    let mut total = 0.0;
    for k in 0..samples {
        let mut d = at(k + 1) - at(k);
        while d > PI / 2.0 {
            d -= PI;
        }
        while d <= -PI / 2.0 {
            d += PI;
        }
        total += d;
    }
    total / (2.0 * PI)
}
