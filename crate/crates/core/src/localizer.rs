//! Minutia-centred patch pipeline: extraction, overlap labelling, patch
//! classifier training and red/green localization overlays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{train_classifier, DetectorConfig, DetectorError, TrainedDetector, TrainingImage};
use crate::eval::{assign_folds, eer, roc, EvalError};
use crate::features::{detect_minutiae, Minutia, MinutiaeConfig};
use crate::image::{load_image, load_mask, resize, save_image, save_rgb_png, BinaryMask, GrayImage, ImageError};
use crate::synth::{DatasetManifest, Label};

pub const PATCH_SIZE: usize = 96;
/// Intensity used for patch pixels outside the image.
pub const BACKGROUND: u8 = 255;
pub const PATCH_INDEX_FILE: &str = "patches.json";

#[derive(Debug, Error)]
pub enum LocalizerError {
    #[error("altered entry {0} has no mask")]
    MissingMask(String),
    #[error("patch corpus must contain both classes")]
    SingleClass,
    #[error("no minutiae found; localization map is empty")]
    EmptyMap,
    #[error("invalid localizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("patch index: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LocalizerError + '_ {
    move |source| LocalizerError::Io { path: path.display().to_string(), source }
}

/// Patch bounds in image coordinates; may extend past the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

impl PatchRect {
    /// Square of side `size` centred on pixel `(cx, cy)`.
    pub fn centered(cx: usize, cy: usize, size: usize) -> Self {
        let half = (size / 2) as i64;
        Self { x: cx as i64 - half, y: cy as i64 - half, w: size, h: size }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Intersection with `0..width` x `0..height` as half-open ranges.
    fn clip(&self, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let span = |start: i64, len: usize, limit: usize| {
            let lo = start.clamp(0, limit as i64) as usize;
            let hi = (start + len as i64).clamp(0, limit as i64) as usize;
            lo..hi.max(lo)
        };
        (span(self.x, self.w, width), span(self.y, self.h, height))
    }
}

/// Denominator of the overlap fraction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapBasis {
    /// Fraction of the patch area covered by the ROI.
    #[default]
    Patch,
    /// Fraction of the ROI covered by the patch.
    Roi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub image_id: String,
    pub minutia: Minutia,
    pub rect: PatchRect,
    pub label: Label,
    pub overlap_fraction: f64,
    /// Whether the centre minutia lies inside the ROI; `None` for patches of
    /// valid images.
    pub center_in_roi: Option<bool>,
}

/// An unlabelled patch with its pixels.
#[derive(Debug, Clone)]
pub struct ExtractedPatch {
    pub minutia: Minutia,
    pub rect: PatchRect,
    pub pixels: GrayImage,
}

/// Pixels of `rect`, with out-of-image pixels set to [`BACKGROUND`].
pub fn crop_padded(image: &GrayImage, rect: PatchRect) -> GrayImage {
    GrayImage::from_fn(rect.w, rect.h, |px, py| {
        let (x, y) = (rect.x + px as i64, rect.y + py as i64);
        if x >= 0 && y >= 0 && (x as usize) < image.width() && (y as usize) < image.height() {
            image.get(x as usize, y as usize)
        } else {
            BACKGROUND
        }
    })
}

/// One `size` x `size` patch centred on each minutia.
pub fn extract_patches(image: &GrayImage, minutiae: &[Minutia], size: usize) -> Vec<ExtractedPatch> {
    minutiae
        .iter()
        .map(|m| {
            let rect = PatchRect::centered(m.x, m.y, size);
            ExtractedPatch { minutia: *m, rect, pixels: crop_padded(image, rect) }
        })
        .collect()
}

/// Overlap of `rect` with `roi` (in-image pixels only) and the resulting
/// label: altered iff the fraction is strictly above one half.
pub fn label_patch(rect: PatchRect, roi: &BinaryMask, basis: OverlapBasis) -> (Label, f64) {
    let (xs, ys) = rect.clip(roi.width(), roi.height());
    let bits = roi.bits();
    let covered: usize = ys.map(|y| bits[y * roi.width() + xs.start..y * roi.width() + xs.end].iter().filter(|&&b| b).count()).sum();
    let denom = match basis {
        OverlapBasis::Patch => rect.area(),
        OverlapBasis::Roi => roi.count(),
    };
    let fraction = if denom == 0 { 0.0 } else { covered as f64 / denom as f64 };
    (if fraction > 0.5 { Label::Altered } else { Label::Valid }, fraction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizerConfig {
    pub patch_size: usize,
    pub overlap_basis: OverlapBasis,
    pub minutiae: MinutiaeConfig,
    /// Patch classifier; its `input_size` is the resized patch side.
    pub classifier: DetectorConfig,
    pub folds: usize,
    pub seed: u64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            patch_size: PATCH_SIZE,
            overlap_basis: OverlapBasis::Patch,
            minutiae: MinutiaeConfig::default(),
            classifier: DetectorConfig { input_size: 48, iterations: 1500, balanced_batches: true, ..DetectorConfig::default() },
            folds: 2,
            seed: 0,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<(), LocalizerError> {
        if self.patch_size < 8 {
            return Err(LocalizerError::Config("patch size below 8".into()));
        }
        if self.folds < 2 {
            return Err(LocalizerError::Config("at least two folds are needed".into()));
        }
        self.classifier.validate()?;
        Ok(())
    }
}

/// Labelled patches; `pixels[i]` is record `i` resized to the classifier
/// input size. `source[i]` indexes the manifest entry it came from.
#[derive(Debug, Clone, Default)]
pub struct PatchCorpus {
    pub records: Vec<PatchRecord>,
    pub pixels: Vec<GrayImage>,
    pub source: Vec<usize>,
}

impl PatchCorpus {
    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Writes `patches/p#######.pgm` plus a JSON index under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), LocalizerError> {
        let dir = dir.as_ref();
        let sub = dir.join("patches");
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let mut index = Vec::with_capacity(self.records.len());
        for (i, (r, px)) in self.records.iter().zip(&self.pixels).enumerate() {
            let file = format!("patches/p{i:07}.pgm");
            save_image(px, dir.join(&file))?;
            index.push(PatchIndexEntry {
                file,
                image_id: r.image_id.clone(),
                x: r.minutia.x,
                y: r.minutia.y,
                label: r.label,
                overlap_fraction: r.overlap_fraction,
            });
        }
        let path = dir.join(PATCH_INDEX_FILE);
        fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(io_err(&path))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatchIndexEntry {
    file: String,
    image_id: String,
    x: usize,
    y: usize,
    label: Label,
    overlap_fraction: f64,
}

/// Patches of one image, labelled against `roi` (valid images pass `None`).
pub fn label_image_patches(
    image_id: &str,
    image: &GrayImage,
    roi: Option<&BinaryMask>,
    config: &LocalizerConfig,
) -> Vec<(PatchRecord, GrayImage)> {
    let (minutiae, _) = detect_minutiae(image, &config.minutiae);
    let side = config.classifier.input_size;
    extract_patches(image, &minutiae, config.patch_size)
        .into_iter()
        .map(|p| {
            let (label, overlap_fraction) = match roi {
                Some(m) => label_patch(p.rect, m, config.overlap_basis),
                None => (Label::Valid, 0.0),
            };
            let rec = PatchRecord {
                image_id: image_id.to_string(),
                minutia: p.minutia,
                rect: p.rect,
                label,
                overlap_fraction,
                center_in_roi: roi.map(|m| m.get(p.minutia.x, p.minutia.y)),
            };
            (rec, resize(&p.pixels, side, side))
        })
        .collect()
}

/// Patches from every manifest entry: valid images give valid patches,
/// altered ones are labelled against their ground-truth masks.
pub fn build_patch_dataset(
    manifest: &DatasetManifest,
    base: &Path,
    config: &LocalizerConfig,
) -> Result<PatchCorpus, LocalizerError> {
    use rayon::prelude::*;
    config.validate()?;
    let per_image: Vec<Vec<(PatchRecord, GrayImage)>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let image = load_image(base.join(&e.image_path))?;
            let roi = match e.label {
                Label::Valid => None,
                Label::Altered => {
                    let mp = e.mask_path.as_ref().ok_or_else(|| LocalizerError::MissingMask(e.image_path.clone()))?;
                    Some(load_mask(base.join(mp))?)
                }
            };
            Ok(label_image_patches(&e.image_path, &image, roi.as_ref(), config))
        })
        .collect::<Result<_, LocalizerError>>()?;
    let mut corpus = PatchCorpus::default();
    for (src, patches) in per_image.into_iter().enumerate() {
        for (rec, px) in patches {
            corpus.records.push(rec);
            corpus.pixels.push(px);
            corpus.source.push(src);
        }
    }
    Ok(corpus)
}

/// Per-fold outcome of the patch-classifier protocol.
#[derive(Debug, Clone)]
pub struct LocalizerFold {
    pub model: TrainedDetector,
    /// Indices into the corpus of this fold's held-out patches.
    pub test: Vec<usize>,
    pub test_scores: Vec<f64>,
    pub eer: f64,
}

#[derive(Debug, Clone)]
pub struct LocalizerRun {
    /// Fold of every corpus patch (shared by all patches of one image).
    pub assignment: Vec<usize>,
    pub folds: Vec<LocalizerFold>,
}

impl LocalizerRun {
    pub fn mean_eer(&self) -> f64 {
        self.folds.iter().map(|f| f.eer).sum::<f64>() / self.folds.len() as f64
    }

    /// Mean held-out score of altered-image patches whose centre lies inside
    /// the ground-truth mask, and of those outside it.
    pub fn inside_outside_means(&self, corpus: &PatchCorpus) -> (f64, f64) {
        let scores = self.held_out_scores();
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (r, &s) in corpus.records.iter().zip(&scores) {
            match r.center_in_roi {
                Some(true) => (si, ni) = (si + s, ni + 1),
                Some(false) => (so, no) = (so + s, no + 1),
                None => {}
            }
        }
        (si / ni as f64, so / no as f64)
    }

    /// Held-out score of every corpus patch.
    pub fn held_out_scores(&self) -> Vec<f64> {
        let mut out = vec![f64::NAN; self.assignment.len()];
        for f in &self.folds {
            for (&i, &s) in f.test.iter().zip(&f.test_scores) {
                out[i] = s;
            }
        }
        out
    }
}

/// K-fold patch classification with folds split by source image: each
/// fold's model is trained on the other folds and scored on its own.
pub fn train_localizer(corpus: &PatchCorpus, config: &LocalizerConfig) -> Result<LocalizerRun, LocalizerError> {
    config.validate()?;
    if corpus.count(Label::Valid) == 0 || corpus.count(Label::Altered) == 0 {
        return Err(LocalizerError::SingleClass);
    }
    let labels: Vec<Label> = corpus.records.iter().map(|r| r.label).collect();
    let groups: Vec<u64> = corpus.source.iter().map(|&s| s as u64).collect();
    let split = assign_folds(&labels, &groups, config.folds, config.seed)?;
    let mut folds = Vec::with_capacity(config.folds);
    for k in 0..config.folds {
        let train: Vec<TrainingImage> = split
            .train_indices(k)
            .into_iter()
            .map(|i| TrainingImage { id: patch_id(&corpus.records[i], i), image: corpus.pixels[i].clone(), label: labels[i] })
            .collect();
        let mut cfg = config.classifier.clone();
        cfg.seed = config.classifier.seed.wrapping_add(k as u64);
        let mut model = train_classifier(&train, &cfg)?;
        let test = split.test_indices(k);
        let images: Vec<GrayImage> = test.iter().map(|&i| corpus.pixels[i].clone()).collect();
        let test_scores = model.scores(&images)?;
        let (mut v, mut a) = (Vec::new(), Vec::new());
        for (&i, &s) in test.iter().zip(&test_scores) {
            match labels[i] {
                Label::Valid => v.push(s),
                Label::Altered => a.push(s),
            }
        }
        let fold_eer = eer(&roc(&v, &a)?);
        log::info!("localizer fold {k}: {} train patches, eer {fold_eer:.4}", train.len());
        folds.push(LocalizerFold { model, test, test_scores, eer: fold_eer });
    }
    Ok(LocalizerRun { assignment: split.assignment, folds })
}

fn patch_id(r: &PatchRecord, i: usize) -> String {
    format!("{}#{}@{},{}", r.image_id, i, r.minutia.x, r.minutia.y)
}

/// Per-minutia scores over an image plus the rendered overlay.
#[derive(Debug, Clone)]
pub struct LocalizationMap {
    pub width: usize,
    pub height: usize,
    pub patches: Vec<(Minutia, PatchRect)>,
    pub scores: Vec<f64>,
    /// Interleaved RGB, `width * height * 3` bytes.
    pub overlay: Vec<u8>,
}

impl LocalizationMap {
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), LocalizerError> {
        Ok(save_rgb_png(self.width, self.height, &self.overlay, path)?)
    }
}

/// Tints every patch-covered pixel by the mean score of the patches
/// covering it: red when the mean is at least 0.5, green otherwise.
pub fn render_overlay(image: &GrayImage, rects: &[PatchRect], scores: &[f64]) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    let mut sum = vec![0.0f64; w * h];
    let mut cnt = vec![0u32; w * h];
    for (r, &s) in rects.iter().zip(scores) {
        let (xs, ys) = r.clip(w, h);
        for y in ys {
            for x in xs.clone() {
                sum[y * w + x] += s;
                cnt[y * w + x] += 1;
            }
        }
    }
    let mut rgb = Vec::with_capacity(w * h * 3);
    for (i, &g) in image.pixels().iter().enumerate() {
        let g = g as f64;
        if cnt[i] == 0 {
            rgb.extend([g as u8; 3]);
            continue;
        }
        let tint = if sum[i] / cnt[i] as f64 >= 0.5 { [255.0, 0.0, 0.0] } else { [0.0, 255.0, 0.0] };
        rgb.extend(tint.map(|t| (0.5 * g + 0.5 * t).round() as u8));
    }
    rgb
}

/// Scores a patch around every detected minutia and renders the overlay.
pub fn localize(model: &mut TrainedDetector, image: &GrayImage, config: &LocalizerConfig) -> Result<LocalizationMap, LocalizerError> {
    let (minutiae, _) = detect_minutiae(image, &config.minutiae);
    if minutiae.is_empty() {
        return Err(LocalizerError::EmptyMap);
    }
    let patches = extract_patches(image, &minutiae, config.patch_size);
    let pixels: Vec<GrayImage> = patches.iter().map(|p| p.pixels.clone()).collect();
    let scores = model.scores(&pixels)?;
    let rects: Vec<PatchRect> = patches.iter().map(|p| p.rect).collect();
    let overlay = render_overlay(image, &rects, &scores);
    Ok(LocalizationMap {
        width: image.width(),
        height: image.height(),
        patches: patches.iter().map(|p| (p.minutia, p.rect)).collect(),
        scores,
        overlay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::MinutiaKind;

    fn minutia(x: usize, y: usize) -> Minutia {
        Minutia { x, y, direction: 0.0, kind: MinutiaKind::Ending }
    }

    #[test]
    fn centred_rect_arithmetic() {
        assert_eq!(PatchRect::centered(256, 256, 96), PatchRect { x: 208, y: 208, w: 96, h: 96 });
    }

    #[test]
    fn corner_patch_is_padded() {
        let img = GrayImage::from_fn(100, 100, |x, y| ((x + y) % 200) as u8);
        let p = &extract_patches(&img, &[minutia(0, 0)], 96)[0];
        assert_eq!(p.rect, PatchRect { x: -48, y: -48, w: 96, h: 96 });
        for py in 0..96 {
            for px in 0..96 {
                let expect = if px >= 48 && py >= 48 { img.get(px - 48, py - 48) } else { BACKGROUND };
                assert_eq!(p.pixels.get(px, py), expect);
            }
        }
    }

    #[test]
    fn overlap_rules() {
        let rect = PatchRect::centered(60, 60, 96);
        assert_eq!(label_patch(rect, &BinaryMask::empty(200, 200), OverlapBasis::Patch), (Label::Valid, 0.0));
        assert_eq!(label_patch(rect, &BinaryMask::full(200, 200), OverlapBasis::Patch), (Label::Altered, 1.0));
        let half = BinaryMask::from_fn(200, 200, |x, _| x < 60);
        assert_eq!(label_patch(rect, &half, OverlapBasis::Patch), (Label::Valid, 0.5));
        let roi = BinaryMask::from_fn(200, 200, |x, y| (20..40).contains(&x) && (20..40).contains(&y));
        assert_eq!(label_patch(rect, &roi, OverlapBasis::Roi), (Label::Altered, 1.0));
    }

    #[test]
    fn zero_scores_paint_green() {
        let img = GrayImage::filled(50, 50, 100);
        let rects = [PatchRect::centered(10, 10, 8), PatchRect::centered(30, 30, 8)];
        let rgb = render_overlay(&img, &rects, &[0.0, 0.0]);
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            let (x, y) = ((i % 50) as i64, (i / 50) as i64);
            let covered = rects.iter().any(|r| x >= r.x && x < r.x + 8 && y >= r.y && y < r.y + 8);
            if covered {
                assert!(px[1] > px[0] && px[1] > px[2]);
            } else {
                assert_eq!(px, [100, 100, 100]);
            }
        }
    }

    #[test]
    fn overlapping_patches_average_before_threshold() {
        let img = GrayImage::filled(20, 20, 0);
        let r = PatchRect::centered(10, 10, 4);
        let rgb = render_overlay(&img, &[r, r], &[0.9, 0.2]);
        let i = (10 * 20 + 10) * 3;
        assert_eq!(&rgb[i..i + 3], &[128, 0, 0]);
        let rgb = render_overlay(&img, &[r, r], &[0.6, 0.2]);
        assert_eq!(&rgb[i..i + 3], &[0, 128, 0]);
    }

    #[test]
    fn blank_image_gives_empty_map() {
        let cfg = LocalizerConfig::default();
        let mut model = TrainedDetector::untrained(&cfg.classifier).unwrap();
        let err = localize(&mut model, &GrayImage::filled(128, 128, 255), &cfg).unwrap_err();
        assert!(matches!(err, LocalizerError::EmptyMap));
    }
}
