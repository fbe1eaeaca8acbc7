//! Classification metrics, paired significance tests and run-level intervals.

mod metrics;
mod paired;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub use metrics::{auc_binary, compute_metrics, midranks, spearman, ClassMetrics, Metrics};
pub use paired::{
    delong_multiclass, delong_test, mcnemar_counts, mcnemar_predictions, mcnemar_test, DelongResult, McNemarResult,
    MulticlassDelong, PairedComparison, ALPHA, MCNEMAR_EXACT_BELOW,
};

use crate::error::{Error, Result};
use crate::inference::Prediction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn half_width(&self) -> f64 {
        (self.hi - self.lo) / 2.0
    }
}

/// Two-sided 95% Student-t interval over independent runs.
pub fn ci_over_runs(values: &[f64]) -> Result<Interval> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!("confidence interval needs >= 2 runs, got {}", values.len())));
    }
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let s = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
    let t = StudentsT::new(0.0, 1.0, r - 1.0).expect("positive dof").inverse_cdf(0.975);
    let h = t * s / r.sqrt();
    Ok(Interval {
        mean,
        lo: mean - h,
        hi: mean + h,
    })
}

/// Serialized metric report: `metrics`, `per_class`, `ci`, `n_runs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub per_class: Vec<ClassMetrics>,
    pub ci: BTreeMap<String, [f64; 2]>,
    pub n_runs: usize,
}

impl MetricReport {
    pub fn from_predictions(preds: &[Prediction]) -> Result<Self> {
        let (m, per_class) = compute_metrics(preds)?;
        let metrics = Metrics::NAMES
            .iter()
            .filter_map(|&k| m.get(k).map(|v| (k.to_string(), v)))
            .collect();
        Ok(Self {
            metrics,
            per_class,
            ci: BTreeMap::new(),
            n_runs: 1,
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Means over runs with a Student-t interval per metric.
    pub fn aggregate(runs: &[MetricReport]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::InvalidArgument("no reports to aggregate".into()))?;
        let mut metrics = BTreeMap::new();
        let mut ci = BTreeMap::new();
        for key in first.metrics.keys() {
            let vals = runs
                .iter()
                .map(|r| r.get(key).ok_or_else(|| Error::InvalidArgument(format!("a run lacks metric `{key}`"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() >= 2 {
                let iv = ci_over_runs(&vals)?;
                metrics.insert(key.clone(), iv.mean);
                ci.insert(key.clone(), [iv.lo, iv.hi]);
            } else {
                metrics.insert(key.clone(), vals[0]);
            }
        }
        let n = runs.len() as f64;
        let per_class = first
            .per_class
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let col = |f: fn(&ClassMetrics) -> f64| runs.iter().map(|r| f(&r.per_class[k])).sum::<f64>() / n;
                let aucs: Vec<f64> = runs.iter().filter_map(|r| r.per_class[k].auc).collect();
                ClassMetrics {
                    class: c.class.clone(),
                    support: c.support,
                    precision: col(|c| c.precision),
                    recall: col(|c| c.recall),
                    f1: col(|c| c.f1),
                    auc: (aucs.len() == runs.len()).then(|| aucs.iter().sum::<f64>() / n),
                }
            })
            .collect();
        Ok(Self {
            metrics,
            per_class,
            ci,
            n_runs: runs.len(),
        })
    }

    /// `0.640 [0.601–0.679]` style cell (no bracket without an interval).
    pub fn cell(&self, name: &str) -> String {
        match (self.get(name), self.ci.get(name)) {
            (Some(v), Some([lo, hi])) => format!("{v:.3} [{lo:.3}–{hi:.3}]"),
            (Some(v), None) => format!("{v:.3}"),
            _ => "n/a".into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

/// Model A vs model B on the same subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n_subjects: usize,
    pub report_a: MetricReport,
    pub report_b: MetricReport,
    /// Per-subject correctness test; applies to accuracy, and is the test
    /// reported next to the precision, recall and F1 differences.
    pub mcnemar: PairedComparison,
    pub metric_deltas: BTreeMap<String, f64>,
    pub delong: MulticlassDelong,
}

pub fn compare_predictions(a: &[Prediction], b: &[Prediction]) -> Result<ComparisonReport> {
    let mcnemar = mcnemar_predictions(a, b)?;
    let delong = delong_multiclass(a, b)?;
    let report_a = MetricReport::from_predictions(a)?;
    let report_b = MetricReport::from_predictions(b)?;
    let metric_deltas = report_a
        .metrics
        .iter()
        .filter_map(|(k, va)| report_b.get(k).map(|vb| (k.clone(), va - vb)))
        .collect();
    Ok(ComparisonReport {
        n_subjects: a.len(),
        report_a,
        report_b,
        mcnemar,
        metric_deltas,
        delong,
    })
}

#[cfg(test)]
mod tests;
