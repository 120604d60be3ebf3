//! Binary classification metrics, contamination sweeps, and an arithmetic
//! check of published precision/recall/F1 triples.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::iforest::threshold_for;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Counts from `(predicted_anomalous, actually_anomalous)` pairs.
    pub fn from_pairs(verdicts: &[(bool, bool)]) -> Self {
        let mut c = ConfusionCounts::default();
        for &(pred, actual) in verdicts {
            match (pred, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn flagged(&self) -> usize {
        self.tp + self.fp
    }
}

/// A metric whose denominator was zero and was reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricWarning {
    /// Nothing was flagged.
    UndefinedPrecision,
    /// No actual anomalies.
    UndefinedRecall,
    /// Precision and recall are both zero.
    UndefinedF1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub warnings: Vec<MetricWarning>,
}

fn ratio(num: usize, den: usize, warning: MetricWarning, warnings: &mut Vec<MetricWarning>) -> f64 {
    if den == 0 {
        warnings.push(warning);
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn metrics_from_counts(counts: ConfusionCounts) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(Error::Contract("no verdicts to evaluate".into()));
    }
    let mut warnings = Vec::new();
    let accuracy = (counts.tp + counts.tn) as f64 / counts.total() as f64;
    let precision = ratio(
        counts.tp,
        counts.tp + counts.fp,
        MetricWarning::UndefinedPrecision,
        &mut warnings,
    );
    let recall = ratio(
        counts.tp,
        counts.tp + counts.fn_,
        MetricWarning::UndefinedRecall,
        &mut warnings,
    );
    if precision + recall == 0.0 {
        warnings.push(MetricWarning::UndefinedF1);
    }
    Ok(MetricsReport {
        counts,
        accuracy,
        precision,
        recall,
        f1: f1_score(precision, recall),
        warnings,
    })
}

/// Metrics over `(predicted_anomalous, actually_anomalous)` pairs.
pub fn compute_metrics(verdicts: &[(bool, bool)]) -> Result<MetricsReport> {
    metrics_from_counts(ConfusionCounts::from_pairs(verdicts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub contamination: f64,
    pub threshold: f64,
    pub report: MetricsReport,
}

/// Re-thresholds a fixed set of test scores at each contamination level
/// using the cached training scores (no refit).
/// `scored` holds `(score, actually_anomalous)` per test image.
pub fn sensitivity_sweep(scored: &[(f64, bool)], grid: &[f64], train_scores: &[f64]) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&c| {
            let threshold = threshold_for(train_scores, c)?;
            let pairs: Vec<(bool, bool)> = scored.iter().map(|&(s, a)| (s > threshold, a)).collect();
            Ok(SweepRow {
                contamination: c,
                threshold,
                report: compute_metrics(&pairs)?,
            })
        })
        .collect()
}

/// `n` evenly spaced values from `start` to `end` inclusive.
pub fn linear_grid(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => alloc::vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// One published `(method, dataset)` result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedResult {
    pub method: &'static str,
    pub dataset: &'static str,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

const fn row(method: &'static str, dataset: &'static str, a: f64, p: f64, r: f64, f1: f64) -> PublishedResult {
    PublishedResult {
        method,
        dataset,
        accuracy: a,
        precision: p,
        recall: r,
        f1,
    }
}

/// Accuracy, precision, recall and F1 reported for the single-step detector
/// ("proposed") and its comparison methods on the 3D-print and tile datasets.
pub const PUBLISHED_RESULTS: [PublishedResult; 12] = [
    row("B&A", "3D Prints", 0.73, 0.77, 0.68, 0.72),
    row("L&F", "3D Prints", 0.67, 0.70, 0.64, 0.67),
    row("DiffusionAD", "3D Prints", 0.42, 0.39, 0.20, 0.27),
    row("AnoDDPM", "3D Prints", 0.46, 0.45, 0.11, 0.18),
    row("DDPM", "3D Prints", 0.50, 0.60, 0.14, 0.22),
    row("proposed", "3D Prints", 0.82, 0.77, 0.93, 0.85),
    row("B&A", "Tile", 0.51, 0.87, 0.35, 0.50),
    row("L&F", "Tile", 0.36, 1.00, 0.07, 0.13),
    row("DiffusionAD", "Tile", 0.35, 0.58, 0.20, 0.30),
    row("AnoDDPM", "Tile", 0.47, 0.63, 0.57, 0.60),
    row("DDPM", "Tile", 0.43, 0.59, 0.57, 0.58),
    row("proposed", "Tile", 0.64, 0.95, 0.51, 0.67),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyRow {
    pub result: PublishedResult,
    /// Harmonic mean recomputed from the published precision and recall.
    pub recomputed_f1: f64,
    pub consistent: bool,
}

/// Recomputes F1 from each published precision/recall pair and compares it
/// with the published F1 within `tolerance`.
pub fn published_f1_consistency(tolerance: f64) -> Vec<ConsistencyRow> {
    PUBLISHED_RESULTS
        .iter()
        .map(|&result| {
            let recomputed_f1 = f1_score(result.precision, result.recall);
            ConsistencyRow {
                result,
                recomputed_f1,
                consistent: (recomputed_f1 - result.f1).abs() <= tolerance,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn perfect_predictions() {
        let r = compute_metrics(&[(true, true), (false, false), (true, true)]).unwrap();
        assert_eq!([r.accuracy, r.precision, r.recall, r.f1], [1.0; 4]);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn all_normal_predictor_warns() {
        let r = compute_metrics(&[(false, true), (false, false)]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.accuracy), (0.0, 0.0, 0.0, 0.5));
        assert_eq!(
            r.warnings,
            [MetricWarning::UndefinedPrecision, MetricWarning::UndefinedF1]
        );
    }

    #[test]
    fn empty_is_a_contract_error() {
        assert!(matches!(compute_metrics(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn f1_of_published_pairs() {
        assert!((f1_score(0.77, 0.93) - 0.8425).abs() < 1e-4);
        assert!((f1_score(0.95, 0.51) - 0.6637).abs() < 1e-4);
        assert!((f1_score(1.00, 0.07) - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn grid_and_single_point_sweep() {
        let g = linear_grid(0.0, 0.5, 11);
        assert_eq!(g.len(), 11);
        assert!((g[1] - 0.05).abs() < 1e-12);
        let train = vec![0.1, 0.2, 0.3, 0.4];
        let scored = vec![(0.35, true), (0.05, false)];
        let rows = sensitivity_sweep(&scored, &[0.25], &train).unwrap();
        assert_eq!(rows[0].threshold, 0.3);
        assert_eq!(rows[0].report.counts.tp, 1);
    }
}
