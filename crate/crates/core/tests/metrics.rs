mod common;

use altprint_core::eval::{auc, eer, histogram, roc, score_histograms, tdr_at_fdr, RocCurve, RocPoint};
use common::oracles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const EXACT: f64 = 1e-12;

fn fdr_tdr(curve: &RocCurve) -> Vec<(f64, f64)> {
    curve.points.iter().map(|p| (p.fdr, p.tdr)).collect()
}

#[test]
fn roc_matches_exhaustive_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let (v, a) = random_scores(&mut rng);
        let curve = roc(&v, &a).unwrap();
        let oracle = roc_oracle(&v, &a);
        assert_eq!(curve.points.len(), oracle.len(), "case {case}");
        for (p, &(t, f, d)) in curve.points.iter().zip(&oracle) {
            assert_eq!(p.threshold, t, "case {case}");
            assert!((p.fdr - f).abs() <= EXACT && (p.tdr - d).abs() <= EXACT, "case {case} at {t}");
        }
    }
}

#[test]
fn tdr_at_fdr_matches_exhaustive_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let (v, a) = random_scores(&mut rng);
        let curve = roc(&v, &a).unwrap();
        let extra: f64 = rng.random_range(0.001..0.999);
        for target in [0.01, 0.02, 0.05, 0.1, extra] {
            let got = tdr_at_fdr(&curve, target).unwrap();
            let (tdr, fdr, threshold) = tdr_at_fdr_oracle(&v, &a, target);
            assert!((got.tdr - tdr).abs() <= EXACT, "case {case} target {target}");
            assert!((got.fdr - fdr).abs() <= EXACT, "case {case} target {target}");
            assert_eq!(got.threshold, threshold, "case {case} target {target}");
        }
    }
}

#[test]
fn eer_matches_segment_intersection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let (v, a) = random_scores(&mut rng);
        let oracle: Vec<(f64, f64)> = roc_oracle(&v, &a).into_iter().map(|(_, f, t)| (f, t)).collect();
        let got = eer(&roc(&v, &a).unwrap());
        let want = eer_oracle(&oracle);
        assert!((got - want).abs() <= EXACT, "case {case}: {got} vs {want}");
    }
}

#[test]
fn curves_are_monotone_with_sentinels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (v, a) = random_scores(&mut rng);
        let c = roc(&v, &a).unwrap();
        let first = c.points.first().unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((first.fdr, first.tdr), (0.0, 0.0));
        assert_eq!((last.fdr, last.tdr), (1.0, 1.0));
        for w in c.points.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].fdr <= w[1].fdr && w[0].tdr <= w[1].tdr);
        }
        let a = auc(&c);
        assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn four_hand_picked_scores_per_class() {
    let valid = [0.1, 0.4, 0.4, 0.7];
    let altered = [0.3, 0.6, 0.8, 0.9];
    let c = roc(&valid, &altered).unwrap();
    let want = [
        (f64::INFINITY, 0.0, 0.0),
        (0.9, 0.0, 0.25),
        (0.8, 0.0, 0.5),
        (0.7, 0.25, 0.5),
        (0.6, 0.25, 0.75),
        (0.4, 0.75, 0.75),
        (0.3, 0.75, 1.0),
        (0.1, 1.0, 1.0),
        (f64::NEG_INFINITY, 1.0, 1.0),
    ];
    let got: Vec<(f64, f64, f64)> = c.points.iter().map(|p| (p.threshold, p.fdr, p.tdr)).collect();
    assert_eq!(got, want);
    assert_eq!(roc_oracle(&valid, &altered), want);
    // 0.25 is the largest reachable FDR under 0.3, with TDR 0.75 at threshold 0.6
    let p = tdr_at_fdr(&c, 0.3).unwrap();
    assert_eq!((p.threshold, p.fdr, p.tdr), (0.6, 0.25, 0.75));
    // crossing between (0.25, fnr 0.25): exactly on the diagonal
    assert_eq!(eer(&c), 0.25);
}

#[test]
fn six_point_curve_bracket() {
    let pts = [(f64::INFINITY, 0.0, 0.0), (0.9, 0.0, 0.5), (0.8, 0.1, 0.8), (0.7, 0.3, 0.9), (0.6, 0.6, 0.95), (f64::NEG_INFINITY, 1.0, 1.0)];
    let curve = RocCurve::from_points(pts.iter().map(|&(threshold, fdr, tdr)| RocPoint { threshold, fdr, tdr }).collect()).unwrap();
    // g = FDR - FNR goes -0.1 -> 0.2 over the bracket, so s = 1/3
    let want = 0.1 + (0.3 - 0.1) / 3.0;
    assert!((eer(&curve) - want).abs() < EXACT);
    assert!((eer_oracle(&fdr_tdr(&curve)) - want).abs() < EXACT);
}

#[test]
fn histogram_counts_and_uniformity() {
    assert_eq!(histogram(&[0.0; 7], 50)[0], 7);
    let h = score_histograms(&[0.0, 0.5, 1.0], &[0.25, 0.99], 50);
    assert_eq!(h.valid.iter().sum::<u64>(), 3);
    assert_eq!(h.altered.iter().sum::<u64>(), 2);
    assert_eq!(h.valid[49], 1, "1.0 falls in the last bin");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let counts = histogram(&scores, 50);
    assert_eq!(counts.iter().sum::<u64>(), n as u64);
    let expected = n as f64 / 50.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(49.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi-square {chi2}, p {p}");
}
