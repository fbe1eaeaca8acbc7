use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF, Normal};

use super::metrics::{auc_binary, labelled};
use crate::error::{Error, Result};
use crate::fusion::NUM_CLASSES;
use crate::inference::{Prediction, CLASS_NAMES};

pub const ALPHA: f64 = 0.05;
/// Below this many discordant pairs McNemar uses the exact binomial test.
pub const MCNEMAR_EXACT_BELOW: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub metric: String,
    pub value_a: f64,
    pub value_b: f64,
    pub test: String,
    pub statistic: f64,
    pub p: f64,
    pub significant: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p: f64,
    pub variance: f64,
    /// Zero variance with a nonzero difference.
    pub degenerate: bool,
}

fn psi(pos: f64, neg: f64) -> f64 {
    if pos > neg {
        1.0
    } else if pos == neg {
        0.5
    } else {
        0.0
    }
}

/// Placement values (V10 over positives, V01 over negatives).
fn placements(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let v10 = pos.iter().map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64).collect();
    let v01 = neg.iter().map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64).collect();
    (v10, v01)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.len() < 2 {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

fn two_sided_normal_p(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * n.sf(z.abs())).min(1.0)
}

/// Paired DeLong test of two correlated AUCs.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::shape("delong_test", "score vectors differ in length"));
    }
    let auc_a = auc_binary(scores_a, labels)?;
    let auc_b = auc_binary(scores_b, labels)?;
    let (a10, a01) = placements(scores_a, labels);
    let (b10, b01) = placements(scores_b, labels);
    let (m, n) = (a10.len() as f64, a01.len() as f64);
    let var = (covariance(&a10, &a10) + covariance(&b10, &b10) - 2.0 * covariance(&a10, &b10)) / m
        + (covariance(&a01, &a01) + covariance(&b01, &b01) - 2.0 * covariance(&a01, &b01)) / n;
    let diff = auc_a - auc_b;
    let var = var.max(0.0);
    let (z, p, degenerate) = if var > 1e-15 {
        let z = diff / var.sqrt();
        (z, two_sided_normal_p(z), false)
    } else if diff.abs() < 1e-15 {
        (0.0, 1.0, false)
    } else {
        (diff.signum() * f64::INFINITY, 0.0, true)
    };
    Ok(DelongResult {
        auc_a,
        auc_b,
        z,
        p,
        variance: var,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassDelong {
    pub per_class: Vec<PairedComparison>,
    /// Any per-class p below `0.05 / 3`.
    pub significant: bool,
}

fn check_paired(a: &[Prediction], b: &[Prediction]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.subject_id != y.subject_id) {
        return Err(Error::InvalidArgument("prediction sets must cover the same subjects in the same order".into()));
    }
    let ta = labelled(a)?;
    if ta != labelled(b)? {
        return Err(Error::InvalidArgument("prediction sets disagree on true labels".into()));
    }
    Ok(ta)
}

/// One-vs-rest DeLong per class with a Bonferroni-combined verdict.
pub fn delong_multiclass(a: &[Prediction], b: &[Prediction]) -> Result<MulticlassDelong> {
    let truth = check_paired(a, b)?;
    let threshold = ALPHA / NUM_CLASSES as f64;
    let mut per_class = Vec::new();
    for k in 0..NUM_CLASSES {
        let labels: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        let sa: Vec<f64> = a.iter().map(|p| p.probs[k]).collect();
        let sb: Vec<f64> = b.iter().map(|p| p.probs[k]).collect();
        let r = delong_test(&sa, &sb, &labels)?;
        per_class.push(PairedComparison {
            metric: format!("auc_{}", CLASS_NAMES[k]),
            value_a: r.auc_a,
            value_b: r.auc_b,
            test: "delong".into(),
            statistic: r.z,
            p: r.p,
            significant: r.p < threshold,
            degenerate: r.degenerate,
        });
    }
    let significant = per_class.iter().any(|c| c.significant);
    Ok(MulticlassDelong { per_class, significant })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    pub b: usize,
    pub c: usize,
    pub statistic: f64,
    pub p: f64,
    pub exact: bool,
}

/// `b` counts subjects only A got right, `c` those only B got right.
pub fn mcnemar_test(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemarResult> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::shape("mcnemar_test", "correctness vectors differ in length"));
    }
    let b = correct_a.iter().zip(correct_b).filter(|(&x, &y)| x && !y).count();
    let c = correct_a.iter().zip(correct_b).filter(|(&x, &y)| !x && y).count();
    Ok(mcnemar_counts(b, c))
}

pub fn mcnemar_counts(b: usize, c: usize) -> McNemarResult {
    let n = b + c;
    if n == 0 {
        return McNemarResult {
            b,
            c,
            statistic: 0.0,
            p: 1.0,
            exact: true,
        };
    }
    if n < MCNEMAR_EXACT_BELOW {
        let k = b.min(c);
        let binom = Binomial::new(0.5, n as u64).expect("valid binomial");
        McNemarResult {
            b,
            c,
            statistic: k as f64,
            p: (2.0 * binom.cdf(k as u64)).min(1.0),
            exact: true,
        }
    } else {
        let d = (b as f64 - c as f64).abs() - 1.0;
        let stat = d.max(0.0).powi(2) / n as f64;
        let chi = ChiSquared::new(1.0).expect("one degree of freedom");
        McNemarResult {
            b,
            c,
            statistic: stat,
            p: chi.sf(stat).min(1.0),
            exact: false,
        }
    }
}

/// Per-subject correctness comparison, reported against accuracy.
pub fn mcnemar_predictions(a: &[Prediction], b: &[Prediction]) -> Result<PairedComparison> {
    let truth = check_paired(a, b)?;
    let ca: Vec<bool> = a.iter().zip(&truth).map(|(p, &t)| p.pred_label == t).collect();
    let cb: Vec<bool> = b.iter().zip(&truth).map(|(p, &t)| p.pred_label == t).collect();
    let r = mcnemar_test(&ca, &cb)?;
    let acc = |c: &[bool]| c.iter().filter(|&&x| x).count() as f64 / c.len() as f64;
    Ok(PairedComparison {
        metric: "accuracy".into(),
        value_a: acc(&ca),
        value_b: acc(&cb),
        test: if r.exact { "mcnemar_exact" } else { "mcnemar_chi2" }.into(),
        statistic: r.statistic,
        p: r.p,
        significant: r.p < ALPHA,
        degenerate: false,
    })
}
