//! Threshold-free and thresholded classification metrics with seeded
//! bootstrap confidence intervals.
//!
//! AUROC uses the Mann-Whitney rank formulation (ties credited 0.5), AUPRC is
//! average precision with tie groups processed atomically, and bootstrap CIs
//! are percentile intervals over `n_resamples` draws with a per-resample
//! sub-seed of `seed + resample_index` so serial and parallel runs agree
//! bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("labels are degenerate: need at least one positive and one negative")]
    DegenerateLabels,
    #[error("no positive labels present")]
    NoPositives,
    #[error("too many degenerate bootstrap resamples: {redraws} redraws for {n_resamples} resamples")]
    TooManyDegenerateResamples { redraws: usize, n_resamples: usize },
}

/// Decision rule orientation: predict positive when the score is on the
/// stated side of the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ScoreGe,
    ScoreLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Auroc,
    Auprc,
    F1,
}

/// Which statistic the bootstrap recomputes per resample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricSpec {
    Auroc,
    Auprc,
    F1 { threshold: f64, direction: Direction },
}

impl MetricSpec {
    pub fn kind(&self) -> MetricKind {
        match self {
            MetricSpec::Auroc => MetricKind::Auroc,
            MetricSpec::Auprc => MetricKind::Auprc,
            MetricSpec::F1 { .. } => MetricKind::F1,
        }
    }
}

/// Point estimate plus percentile-bootstrap confidence interval.
///
/// The CI convention (percentile, 2.5/97.5, interval clamped to bracket the
/// point estimate) is recorded in `ci_method` because downstream reports are
/// expected to be explicit about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
    pub seed: u64,
    pub n: usize,
    pub n_pos: usize,
    pub ci_method: String,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

/// Area under the ROC curve via the rank-sum (Mann-Whitney) formulation.
/// Tied score pairs are credited 0.5, which makes the value identical to the
/// trapezoidal area of the tie-grouped ROC curve.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::DegenerateLabels);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b))
    });

    // Average ranks within tie groups; ranks are 1-based.
    let mut rank_sum_pos = 0.0_f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Area under the precision-recall curve as average precision: the sum over
/// recall increments of precision at that cut, with tied scores treated as a
/// single atomic cut. No interpolation.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });

    let n_pos_f = n_pos as f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0_f64;
    let mut ap = 0.0_f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mut group_pos = 0usize;
        for &k in &order[i..=j] {
            if labels[k] {
                group_pos += 1;
            }
        }
        let group_len = j - i + 1;
        tp += group_pos;
        fp += group_len - group_pos;
        if group_pos > 0 {
            let recall = tp as f64 / n_pos_f;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        i = j + 1;
    }
    Ok(ap)
}

/// F1 at a fixed decision threshold. Returns 0 by convention when there are
/// no true positives (covers the no-predicted-positives case).
pub fn f1_at(scores: &[f64], labels: &[bool], threshold: f64, direction: Direction) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted = match direction {
            Direction::ScoreGe => s >= threshold,
            Direction::ScoreLe => s <= threshold,
        };
        match (predicted, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

fn compute_metric(spec: &MetricSpec, scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    match spec {
        MetricSpec::Auroc => auroc(scores, labels),
        MetricSpec::Auprc => auprc(scores, labels),
        MetricSpec::F1 { threshold, direction } => {
            check_lengths(scores, labels)?;
            Ok(f1_at(scores, labels, *threshold, *direction))
        }
    }
}

/// Whether a resample supports the metric at all. Degenerate resamples are
/// redrawn rather than skipped so every report is based on exactly
/// `n_resamples` effective resamples.
fn resample_ok(spec: &MetricSpec, n_pos: usize, n: usize) -> bool {
    match spec {
        MetricSpec::Auroc => n_pos > 0 && n_pos < n,
        MetricSpec::Auprc => n_pos > 0,
        MetricSpec::F1 { .. } => true,
    }
}

const MAX_REDRAWS_PER_RESAMPLE: usize = 10_000;

fn one_resample(
    spec: &MetricSpec,
    scores: &[f64],
    labels: &[bool],
    sub_seed: u64,
) -> Result<(f64, usize), MetricsError> {
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    let mut s = vec![0.0_f64; n];
    let mut l = vec![false; n];
    let mut redraws = 0usize;
    loop {
        let mut n_pos = 0usize;
        for i in 0..n {
            let k = rng.gen_range(0..n);
            s[i] = scores[k];
            l[i] = labels[k];
            if l[i] {
                n_pos += 1;
            }
        }
        if resample_ok(spec, n_pos, n) {
            let stat = compute_metric(spec, &s, &l)?;
            return Ok((stat, redraws));
        }
        redraws += 1;
        if redraws > MAX_REDRAWS_PER_RESAMPLE {
            return Err(MetricsError::TooManyDegenerateResamples {
                redraws,
                n_resamples: 1,
            });
        }
    }
}

/// Linear-interpolation quantile over sorted values.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Percentile-bootstrap confidence interval around the point statistic.
///
/// Records are resampled with replacement (`n` draws per resample); the
/// 2.5/97.5 percentile interval is clamped to bracket the full-sample point
/// estimate. With `n_resamples == 0`, the CI degenerates to the point.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[bool],
    spec: MetricSpec,
    n_resamples: usize,
    seed: u64,
) -> Result<MetricReport, MetricsError> {
    let point = compute_metric(&spec, scores, labels)?;
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l).count();

    let mut report = MetricReport {
        metric: spec.kind(),
        point,
        ci_low: point,
        ci_high: point,
        n_resamples,
        seed,
        n,
        n_pos,
        ci_method: "percentile-2.5/97.5".to_string(),
    };
    if n_resamples == 0 {
        return Ok(report);
    }

    let results: Vec<Result<(f64, usize), MetricsError>> = (0..n_resamples)
        .into_par_iter()
        .map(|i| one_resample(&spec, scores, labels, seed.wrapping_add(i as u64)))
        .collect();

    let mut stats = Vec::with_capacity(n_resamples);
    let mut redraws = 0usize;
    for r in results {
        let (stat, rd) = r?;
        stats.push(stat);
        redraws += rd;
    }
    if redraws * 2 > n_resamples {
        return Err(MetricsError::TooManyDegenerateResamples { redraws, n_resamples });
    }

    stats.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    report.ci_low = quantile_sorted(&stats, 0.025).min(point);
    report.ci_high = quantile_sorted(&stats, 0.975).max(point);
    Ok(report)
}

/// Full operating-point lists for the ROC and PR curves.
#[derive(Debug, Clone, Serialize)]
pub struct Curves {
    /// (false positive rate, true positive rate), starting (0,0), ending (1,1).
    pub roc: Vec<(f64, f64)>,
    /// (recall, precision), starting (0,1), one point per positive-containing cut.
    pub pr: Vec<(f64, f64)>,
}

impl Curves {
    /// Trapezoidal area of the emitted ROC points.
    pub fn roc_trapezoid_area(&self) -> f64 {
        let mut area = 0.0;
        for w in self.roc.windows(2) {
            let (x1, y1) = w[0];
            let (x2, y2) = w[1];
            area += (x2 - x1) * (y2 + y1) / 2.0;
        }
        area
    }

    /// Step area of the emitted PR points (right-continuous steps).
    pub fn pr_step_area(&self) -> f64 {
        let mut area = 0.0;
        for w in self.pr.windows(2) {
            let (r1, _) = w[0];
            let (r2, p2) = w[1];
            area += (r2 - r1) * p2;
        }
        area
    }
}

/// Emit ROC and PR operating points, one per distinct-score cut.
pub fn compute_curves(scores: &[f64], labels: &[bool]) -> Result<Curves, MetricsError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::DegenerateLabels);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });

    let mut roc = vec![(0.0, 0.0)];
    let mut pr = vec![(0.0, 1.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mut group_pos = 0usize;
        for &k in &order[i..=j] {
            if labels[k] {
                group_pos += 1;
            }
        }
        tp += group_pos;
        fp += (j - i + 1) - group_pos;
        roc.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        if group_pos > 0 {
            pr.push((tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64));
        }
        i = j + 1;
    }
    Ok(Curves { roc, pr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// O(n^2) pair-count oracle for AUROC with 0.5 tie credit.
    fn auroc_pair_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    /// Direct cut-enumeration oracle for average precision.
    fn auprc_cut_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut cuts: Vec<f64> = scores.to_vec();
        cuts.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
        cuts.dedup();
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &c in &cuts {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &l)| s >= c && l)
                .count() as f64;
            let pp = scores.iter().filter(|&&s| s >= c).count() as f64;
            let recall = tp / n_pos;
            if recall > prev_recall {
                ap += (recall - prev_recall) * (tp / pp);
                prev_recall = recall;
            }
        }
        ap
    }

    #[test]
    fn auroc_separable() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn auroc_with_ties_matches_hand_count() {
        // pairs: (0.5 + 0 + 1 + 0.5) / 4
        let a = auroc(&[0.2, 0.2, 0.8, 0.8], &[false, true, false, true]).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn auroc_degenerate_labels() {
        assert_eq!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(MetricsError::DegenerateLabels)
        );
    }

    #[test]
    fn auprc_separable_and_single_positive() {
        assert_eq!(auprc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        // single positive at rank 2: precision 1/2 at full recall
        assert_eq!(auprc(&[0.9, 0.8], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn auprc_constant_scores_equals_prevalence() {
        let a = auprc(&[0.3; 8], &[true, false, false, true, false, false, false, false]).unwrap();
        assert!((a - 0.25).abs() < 1e-15);
    }

    #[test]
    fn auroc_constant_scores_is_chance_level() {
        let a = auroc(&[0.7; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn f1_confusion_matrix_arithmetic() {
        // TP=2, FP=1, FN=1 -> 2/3
        let f1 = f1_at(
            &[0.9, 0.8, 0.6, 0.3],
            &[true, true, false, true],
            0.5,
            Direction::ScoreGe,
        );
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        // no predicted positives -> 0
        assert_eq!(
            f1_at(&[0.1, 0.2], &[true, false], 0.5, Direction::ScoreGe),
            0.0
        );
        // perfect
        assert_eq!(
            f1_at(&[0.9, 0.1], &[true, false], 0.5, Direction::ScoreGe),
            1.0
        );
    }

    #[test]
    fn oracle_agreement_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.gen_range(5..200);
            let mut scores = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                // coarse grid forces ties
                scores.push((rng.gen_range(0..20) as f64) / 20.0);
                labels.push(rng.gen_bool(0.4));
            }
            if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
                continue;
            }
            let a = auroc(&scores, &labels).unwrap();
            assert!((a - auroc_pair_oracle(&scores, &labels)).abs() <= 1e-12);
            let p = auprc(&scores, &labels).unwrap();
            assert!((p - auprc_cut_oracle(&scores, &labels)).abs() <= 1e-12);
        }
    }

    #[test]
    fn bootstrap_perfect_data_has_degenerate_ci() {
        let scores = vec![0.9, 0.8, 0.7, 0.2, 0.1, 0.05];
        let labels = vec![true, true, true, false, false, false];
        let r = bootstrap_ci(&scores, &labels, MetricSpec::Auroc, 200, 3).unwrap();
        assert_eq!((r.ci_low, r.point, r.ci_high), (1.0, 1.0, 1.0));
    }

    #[test]
    fn bootstrap_is_deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..80).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<bool> = scores.iter().map(|&s| s > 0.4 && rng.gen_bool(0.8)).collect();
        let a = bootstrap_ci(&scores, &labels, MetricSpec::Auroc, 500, 11).unwrap();
        let b = bootstrap_ci(&scores, &labels, MetricSpec::Auroc, 500, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_low <= a.point && a.point <= a.ci_high);
    }

    #[test]
    fn bootstrap_ci_width_shrinks_with_n() {
        let make = |n: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(100);
            let mut scores = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let y = rng.gen_bool(0.3);
                let s = if y { rng.gen::<f64>() * 0.8 + 0.2 } else { rng.gen::<f64>() * 0.8 };
                scores.push(s);
                labels.push(y);
            }
            (scores, labels)
        };
        let (s1, l1) = make(100);
        let (s2, l2) = make(4000);
        let w1 = {
            let r = bootstrap_ci(&s1, &l1, MetricSpec::Auroc, 1000, 5).unwrap();
            r.ci_high - r.ci_low
        };
        let w2 = {
            let r = bootstrap_ci(&s2, &l2, MetricSpec::Auroc, 1000, 5).unwrap();
            r.ci_high - r.ci_low
        };
        assert!(w2 < w1, "expected CI width to shrink: {w2} vs {w1}");
    }

    #[test]
    fn curves_small_separable() {
        let c = compute_curves(&[0.9, 0.1], &[true, false]).unwrap();
        assert_eq!(c.roc, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn curve_areas_match_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(10..150);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..15) as f64) / 15.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.35)).collect();
            if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
                continue;
            }
            let c = compute_curves(&scores, &labels).unwrap();
            assert!((c.roc_trapezoid_area() - auroc(&scores, &labels).unwrap()).abs() <= 1e-12);
            assert!((c.pr_step_area() - auprc(&scores, &labels).unwrap()).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auroc_complement_identity(raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 4..60)) {
            // make scores tie-free by construction
            let mut scores: Vec<f64> = raw.iter().enumerate().map(|(i, (s, _))| s + i as f64 * 1e-9).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && !labels.iter().all(|&l| l));
            let a = auroc(&scores, &labels).unwrap();
            for s in scores.iter_mut() {
                *s = -*s;
            }
            let b = auroc(&scores, &labels).unwrap();
            prop_assert!((a + b - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn auroc_monotone_transform_invariance(raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 4..60)) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && !labels.iter().all(|&l| l));
            let a = auroc(&scores, &labels).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s + 1.0).exp()).collect();
            let b = auroc(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
