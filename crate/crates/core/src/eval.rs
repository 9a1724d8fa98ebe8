//! Fold construction, ROC analysis and score histograms.
//!
//! A score at or above a threshold counts as "detected altered". FDR is the
//! fraction of valid prints detected (false-positive rate); TDR the fraction
//! of altered prints detected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{load_entries, train_classifier, DetectorConfig, DetectorError, TrainedDetector, TrainingImage};
use crate::synth::{DatasetManifest, Label};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fold count {k} invalid for class counts {valid} valid / {altered} altered")]
    FoldCount { k: usize, valid: usize, altered: usize },
    #[error("empty score list")]
    EmptyScores,
    #[error("fdr target {0} outside (0, 1)")]
    Target(f64),
    #[error("invalid roc curve: {0}")]
    Curve(String),
}

// ---------------------------------------------------------------------------
// Folds

/// What must not straddle a train/test boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldGrouping {
    #[default]
    Subject,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    /// Fold id per manifest entry.
    pub assignment: Vec<usize>,
}

impl FoldSplit {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

/// Stratified, group-aware k-fold assignment.
///
/// Groups (subjects, or single images) are shuffled by `seed`, ordered
/// largest first, and each goes to the fold that minimizes the sum over the
/// classes it contains of `(fold count + group count) / per-fold target`,
/// ties going to the lighter, then lower-numbered fold. For single-class
/// groups this keeps per-class fold sizes within one of each other.
pub fn make_folds(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
    grouping: FoldGrouping,
) -> Result<FoldSplit, EvalError> {
    let labels: Vec<Label> = manifest.entries.iter().map(|e| e.label).collect();
    let keys: Vec<u64> = match grouping {
        FoldGrouping::Subject => manifest.entries.iter().map(|e| e.subject_id).collect(),
        FoldGrouping::Image => (0..labels.len() as u64).collect(),
    };
    assign_folds(&labels, &keys, k, seed)
}

/// [`make_folds`] on bare labels and group keys.
pub fn assign_folds(labels: &[Label], groups: &[u64], k: usize, seed: u64) -> Result<FoldSplit, EvalError> {
    let valid = labels.iter().filter(|&&l| l == Label::Valid).count();
    let altered = labels.len() - valid;
    if k < 2 || k > valid || k > altered || labels.len() != groups.len() {
        return Err(EvalError::FoldCount { k, valid, altered });
    }
    let mut by_group: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut members: Vec<Vec<usize>> = by_group.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..members.len()).rev() {
        let j = rng.random_range(0..=i);
        members.swap(i, j);
    }
    members.sort_by_key(|m| std::cmp::Reverse(m.len()));

    let target = [valid as f64 / k as f64, altered as f64 / k as f64];
    let mut load = vec![[0usize; 2]; k];
    let mut assignment = vec![0usize; labels.len()];
    for group in &members {
        let mut g = [0usize; 2];
        for &i in group {
            g[labels[i].index()] += 1;
        }
        let cost = |f: usize| -> f64 {
            (0..2).filter(|&c| g[c] > 0).map(|c| (load[f][c] + g[c]) as f64 / target[c]).sum()
        };
        let best = (0..k)
            .min_by(|&a, &b| {
                cost(a)
                    .total_cmp(&cost(b))
                    .then((load[a][0] + load[a][1]).cmp(&(load[b][0] + load[b][1])))
                    .then(a.cmp(&b))
            })
            .expect("k >= 2");
        load[best][0] += g[0];
        load[best][1] += g[1];
        for &i in group {
            assignment[i] = best;
        }
    }
    Ok(FoldSplit { k, assignment })
}

// ---------------------------------------------------------------------------
// ROC

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fdr: f64,
    pub tdr: f64,
}

/// Operating points sorted by descending threshold, from the `+inf`
/// sentinel at (0, 0) to the `-inf` sentinel at (1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Validates a hand-built curve.
    pub fn from_points(points: Vec<RocPoint>) -> Result<Self, EvalError> {
        if points.len() < 2 {
            return Err(EvalError::Curve("need at least two points".into()));
        }
        for p in points.windows(2) {
            if !(p[0].threshold > p[1].threshold) || p[1].fdr < p[0].fdr || p[1].tdr < p[0].tdr {
                return Err(EvalError::Curve("points must be monotone".into()));
            }
        }
        Ok(Self { points })
    }

    /// `threshold,FDR,TDR` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,FDR,TDR\n");
        for p in &self.points {
            writeln!(s, "{},{},{}", p.threshold, p.fdr, p.tdr).expect("string write");
        }
        s
    }
}

/// ROC over every distinct score plus the two sentinels.
pub fn roc(valid_scores: &[f64], altered_scores: &[f64]) -> Result<RocCurve, EvalError> {
    if valid_scores.is_empty() || altered_scores.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let mut all: Vec<(f64, bool)> = valid_scores
        .iter()
        .map(|&s| (s, false))
        .chain(altered_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nv, na) = (valid_scores.len() as f64, altered_scores.len() as f64);
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fdr: 0.0, tdr: 0.0 }];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold: t, fdr: fp as f64 / nv, tdr: tp as f64 / na });
    }
    points.push(RocPoint { threshold: f64::NEG_INFINITY, fdr: 1.0, tdr: 1.0 });
    Ok(RocCurve { points })
}

/// The operating point with the largest FDR not exceeding `target`
/// (highest TDR among ties). No interpolation.
pub fn tdr_at_fdr(curve: &RocCurve, target: f64) -> Result<RocPoint, EvalError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(EvalError::Target(target));
    }
    curve
        .points
        .iter()
        .filter(|p| p.fdr <= target)
        .copied()
        .max_by(|a, b| a.fdr.total_cmp(&b.fdr).then(a.tdr.total_cmp(&b.tdr)))
        .ok_or_else(|| EvalError::Curve("no point at or below the target".into()))
}

/// Equal error rate: where FDR = 1 - TDR, linearly interpolated between
/// the bracketing operating points.
pub fn eer(curve: &RocCurve) -> f64 {
    let pts = &curve.points;
    let d = |p: &RocPoint| p.fdr - (1.0 - p.tdr);
    for i in 0..pts.len() {
        let di = d(&pts[i]);
        if di == 0.0 {
            return pts[i].fdr;
        }
        if di > 0.0 {
            if i == 0 {
                return pts[0].fdr;
            }
            let dp = d(&pts[i - 1]);
            let t = -dp / (di - dp);
            return pts[i - 1].fdr + t * (pts[i].fdr - pts[i - 1].fdr);
        }
    }
    pts.last().map(|p| p.fdr).unwrap_or(0.5)
}

/// Trapezoidal area under TDR(FDR).
pub fn auc(curve: &RocCurve) -> f64 {
    curve.points.windows(2).map(|p| (p[1].fdr - p[0].fdr) * (p[1].tdr + p[0].tdr) / 2.0).sum()
}

// ---------------------------------------------------------------------------
// Histograms

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    pub bins: usize,
    pub valid: Vec<u64>,
    pub altered: Vec<u64>,
}

pub fn histogram(scores: &[f64], bins: usize) -> Vec<u64> {
    let bins = bins.max(1);
    let mut h = vec![0u64; bins];
    for &s in scores {
        let b = ((s.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

/// Equal-width histograms over [0, 1].
pub fn score_histograms(valid_scores: &[f64], altered_scores: &[f64], bins: usize) -> ScoreHistograms {
    ScoreHistograms {
        bins: bins.max(1),
        valid: histogram(valid_scores, bins),
        altered: histogram(altered_scores, bins),
    }
}

/// `bin_lo,bin_hi,count` rows for one class.
pub fn histogram_csv(counts: &[u64]) -> String {
    let n = counts.len() as f64;
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        writeln!(s, "{},{},{}", i as f64 / n, (i + 1) as f64 / n, c).expect("string write");
    }
    s
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

// ---------------------------------------------------------------------------
// Experiments

/// FDR operating points reported per fold.
pub const FDR_TARGETS: [f64; 4] = [0.01, 0.02, 0.05, 0.1];

/// Figures from the reference study on operational data, recorded for
/// comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMetrics {
    pub fdr: f64,
    pub tdr_mean: f64,
    pub tdr_std: f64,
    pub localization_eer: f64,
    pub median_quality_altered: f64,
    pub median_quality_valid: f64,
}

pub const REFERENCE_METRICS: ReferenceMetrics = ReferenceMetrics {
    fdr: 0.02,
    tdr_mean: 0.9924,
    tdr_std: 0.0058,
    localization_eer: 0.085,
    median_quality_altered: 23.0,
    median_quality_valid: 48.0,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub folds: usize,
    pub grouping: FoldGrouping,
    pub seed: u64,
    pub histogram_bins: usize,
    pub fdr_targets: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { folds: 5, grouping: FoldGrouping::Subject, seed: 0, histogram_bins: 50, fdr_targets: FDR_TARGETS.to_vec() }
    }
}

/// TDR at one FDR target. `threshold` is `None` for a sentinel point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdrAtFdr {
    pub fdr_target: f64,
    pub tdr: f64,
    pub fdr: f64,
    pub threshold: Option<f64>,
}

impl TdrAtFdr {
    fn from_point(target: f64, p: RocPoint) -> Self {
        Self { fdr_target: target, tdr: p.tdr, fdr: p.fdr, threshold: p.threshold.is_finite().then_some(p.threshold) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub train_count: usize,
    pub test_valid: usize,
    pub test_altered: usize,
    pub tdr_at_fdr: Vec<TdrAtFdr>,
    pub eer: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    /// `(fdr_target, mean +- sample std of TDR over folds)`.
    pub tdr_at_fdr: Vec<(f64, MeanStd)>,
    pub eer: MeanStd,
    pub auc: MeanStd,
}

impl AggregateMetrics {
    pub fn from_folds(folds: &[FoldMetrics], targets: &[f64]) -> Self {
        let tdr_at_fdr = targets
            .iter()
            .enumerate()
            .map(|(j, &t)| (t, MeanStd::of(&folds.iter().map(|f| f.tdr_at_fdr[j].tdr).collect::<Vec<_>>())))
            .collect();
        Self {
            tdr_at_fdr,
            eer: MeanStd::of(&folds.iter().map(|f| f.eer).collect::<Vec<_>>()),
            auc: MeanStd::of(&folds.iter().map(|f| f.auc).collect::<Vec<_>>()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub experiment: ExperimentConfig,
    pub detector: DetectorConfig,
    pub folds: Vec<FoldMetrics>,
    pub aggregate: AggregateMetrics,
    /// Pooled held-out scores of all folds.
    pub histograms: ScoreHistograms,
    pub reference: ReferenceMetrics,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Report plus the per-fold models and every entry's held-out score.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub split: FoldSplit,
    pub models: Vec<TrainedDetector>,
    pub scores: Vec<f64>,
    pub curves: Vec<RocCurve>,
}

/// Metrics of one set of held-out scores.
pub fn fold_metrics(fold: usize, train_count: usize, valid: &[f64], altered: &[f64], targets: &[f64]) -> Result<(FoldMetrics, RocCurve), EvalError> {
    let curve = roc(valid, altered)?;
    let tdr = targets.iter().map(|&t| Ok(TdrAtFdr::from_point(t, tdr_at_fdr(&curve, t)?))).collect::<Result<_, EvalError>>()?;
    let m = FoldMetrics {
        fold,
        train_count,
        test_valid: valid.len(),
        test_altered: altered.len(),
        tdr_at_fdr: tdr,
        eer: eer(&curve),
        auc: auc(&curve),
    };
    Ok((m, curve))
}

/// K-fold detector evaluation. With `out_dir`, writes `report.json`,
/// `roc_fold<i>.csv`, `hist_valid.csv`, `hist_altered.csv`, per-fold
/// models and training logs, and `scores.csv`.
pub fn run_experiment(
    manifest: &DatasetManifest,
    base: &Path,
    experiment: &ExperimentConfig,
    detector: &DetectorConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome, ExperimentError> {
    let split = make_folds(manifest, experiment.folds, experiment.seed, experiment.grouping)?;
    let all: Vec<usize> = (0..manifest.entries.len()).collect();
    let data = load_entries(manifest, base, &all)?;
    let mut scores = vec![f64::NAN; data.len()];
    let mut folds = Vec::with_capacity(experiment.folds);
    let mut models = Vec::with_capacity(experiment.folds);
    let mut curves = Vec::with_capacity(experiment.folds);
    for k in 0..experiment.folds {
        let train_idx = split.train_indices(k);
        let test_idx = split.test_indices(k);
        let train: Vec<TrainingImage> = train_idx.iter().map(|&i| data[i].clone()).collect();
        let mut cfg = detector.clone();
        cfg.seed = detector.seed.wrapping_add(k as u64);
        let mut model = train_classifier(&train, &cfg)?;
        let images: Vec<_> = test_idx.iter().map(|&i| data[i].image.clone()).collect();
        let s = model.scores(&images)?;
        let (mut v, mut a) = (Vec::new(), Vec::new());
        for (&i, &sc) in test_idx.iter().zip(&s) {
            scores[i] = sc;
            match data[i].label {
                Label::Valid => v.push(sc),
                Label::Altered => a.push(sc),
            }
        }
        let (m, curve) = fold_metrics(k, train.len(), &v, &a, &experiment.fdr_targets)?;
        log::info!("fold {k}: auc {:.4} eer {:.4}", m.auc, m.eer);
        folds.push(m);
        models.push(model);
        curves.push(curve);
    }
    let (mut v, mut a) = (Vec::new(), Vec::new());
    for (d, &s) in data.iter().zip(&scores) {
        match d.label {
            Label::Valid => v.push(s),
            Label::Altered => a.push(s),
        }
    }
    let report = MetricsReport {
        seed: experiment.seed,
        experiment: experiment.clone(),
        detector: detector.clone(),
        aggregate: AggregateMetrics::from_folds(&folds, &experiment.fdr_targets),
        folds,
        histograms: score_histograms(&v, &a, experiment.histogram_bins),
        reference: REFERENCE_METRICS,
    };
    let outcome = ExperimentOutcome { report, split, models, scores, curves };
    if let Some(dir) = out_dir {
        write_outcome(&outcome, manifest, dir)?;
    }
    Ok(outcome)
}

fn write_outcome(o: &ExperimentOutcome, manifest: &DatasetManifest, dir: &Path) -> Result<(), ExperimentError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| ExperimentError::Io { path, source }
    };
    let put = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(io(&p))
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    put("report.json", o.report.to_json())?;
    for (k, (curve, model)) in o.curves.iter().zip(&o.models).enumerate() {
        put(&format!("roc_fold{k}.csv"), curve.to_csv())?;
        put(&format!("train_fold{k}.csv"), model.training_log_csv())?;
        model.save(dir.join(format!("model_fold{k}.w")))?;
    }
    put("hist_valid.csv", histogram_csv(&o.report.histograms.valid))?;
    put("hist_altered.csv", histogram_csv(&o.report.histograms.altered))?;
    let mut s = String::from("image_path,label,fold,score\n");
    for ((e, &f), sc) in manifest.entries.iter().zip(&o.split.assignment).zip(&o.scores) {
        let label = match e.label {
            Label::Valid => "valid",
            Label::Altered => "altered",
        };
        writeln!(s, "{},{label},{f},{sc}", e.image_path).expect("string write");
    }
    put("scores.csv", s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_scores() {
        let c = roc(&[0.1; 5], &[0.9; 5]).unwrap();
        assert!(c.points.iter().any(|p| p.fdr == 0.0 && p.tdr == 1.0));
        assert_eq!(eer(&c), 0.0);
        assert_eq!(auc(&c), 1.0);
        assert_eq!(tdr_at_fdr(&c, 0.02).unwrap().tdr, 1.0);
    }

    #[test]
    fn identical_distributions_lie_on_diagonal() {
        let s: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let c = roc(&s, &s).unwrap();
        assert!(c.points.iter().all(|p| p.fdr == p.tdr));
        assert!((eer(&c) - 0.5).abs() < 1e-12);
        assert!((auc(&c) - 0.5).abs() < 1e-12);
        let p = tdr_at_fdr(&c, 0.25).unwrap();
        assert_eq!((p.fdr, p.tdr), (0.2, 0.2));
    }

    #[test]
    fn hand_bracket_interpolation() {
        let pts = [(0.0, 0.0), (0.05, 0.5), (0.1, 0.8), (0.3, 0.9), (0.6, 0.95), (1.0, 1.0)];
        let curve = RocCurve::from_points(
            pts.iter().enumerate().map(|(i, &(f, t))| RocPoint { threshold: -(i as f64), fdr: f, tdr: t }).collect(),
        )
        .unwrap();
        // d = -0.1 at (0.1, fnr 0.2) and +0.2 at (0.3, fnr 0.1): crossing one third of the way
        assert!((eer(&curve) - (0.1 + 0.2 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_and_bad_targets() {
        assert!(roc(&[], &[0.5]).is_err());
        let c = roc(&[0.2], &[0.7]).unwrap();
        assert!(tdr_at_fdr(&c, 0.0).is_err());
        assert!(tdr_at_fdr(&c, 1.0).is_err());
    }

    #[test]
    fn histogram_edges() {
        let h = score_histograms(&[0.0; 7], &[1.0, 0.5, 0.999], 50);
        assert_eq!(h.valid[0], 7);
        assert_eq!(h.altered[49], 2);
        assert_eq!(h.altered[25], 1);
        assert_eq!(h.valid.iter().sum::<u64>(), 7);
    }

    #[test]
    fn small_fold_arithmetic() {
        let labels: Vec<Label> = (0..20).map(|i| if i < 10 { Label::Valid } else { Label::Altered }).collect();
        let groups: Vec<u64> = (0..20).collect();
        let split = assign_folds(&labels, &groups, 5, 1).unwrap();
        for f in 0..5 {
            let t = split.test_indices(f);
            assert_eq!(t.iter().filter(|&&i| labels[i] == Label::Valid).count(), 2);
            assert_eq!(t.len(), 4);
        }
        assert!(assign_folds(&labels, &groups, 11, 1).is_err());
        assert!(assign_folds(&labels, &groups, 1, 1).is_err());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
