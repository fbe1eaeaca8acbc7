use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::NUM_CLASSES;
use crate::inference::Prediction;

/// 1-based ranks with ties given their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-sum AUC with midranks (ties count one half).
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc_binary", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both positive and negative examples".into()));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Spearman rank correlation (Pearson on midranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series of length >= 2".into()));
    }
    let (rx, ry) = (midranks(x), midranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArgument("spearman undefined for a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean over classes whose AUC is defined.
    pub auc: Option<f64>,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["accuracy", "precision", "recall", "f1", "auc"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "f1" => Some(self.f1),
            "auc" => self.auc,
            _ => None,
        }
    }
}

pub(crate) fn labelled(preds: &[Prediction]) -> Result<Vec<usize>> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    preds
        .iter()
        .map(|p| match p.true_label {
            Some(l) if l < NUM_CLASSES => Ok(l),
            Some(l) => Err(Error::InvalidArgument(format!("subject `{}` has label {l}", p.subject_id))),
            None => Err(Error::InvalidArgument(format!("subject `{}` has no true label", p.subject_id))),
        })
        .collect()
}

/// Accuracy, macro precision/recall/F1 and one-vs-rest AUCs.
pub fn compute_metrics(preds: &[Prediction]) -> Result<(Metrics, Vec<ClassMetrics>)> {
    let truth = labelled(preds)?;
    let n = preds.len() as f64;
    let correct = preds.iter().zip(&truth).filter(|(p, &t)| p.pred_label == t).count();
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for k in 0..NUM_CLASSES {
        let tp = preds.iter().zip(&truth).filter(|(p, &t)| p.pred_label == k && t == k).count() as f64;
        let predicted = preds.iter().filter(|p| p.pred_label == k).count() as f64;
        let support = truth.iter().filter(|&&t| t == k).count();
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let scores: Vec<f64> = preds.iter().map(|p| p.probs[k]).collect();
        let labels: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        let auc = auc_binary(&scores, &labels).ok();
        if auc.is_none() {
            log::warn!("AUC undefined for class {}: single-class subset", crate::inference::CLASS_NAMES[k]);
        }
        per_class.push(ClassMetrics {
            class: crate::inference::CLASS_NAMES[k].to_string(),
            support,
            precision,
            recall,
            f1,
            auc,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    let aucs: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let metrics = Metrics {
        accuracy: correct as f64 / n,
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    };
    Ok((metrics, per_class))
}
