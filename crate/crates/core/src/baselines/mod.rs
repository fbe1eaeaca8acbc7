//! Clinical-only reference classifiers: QDA, ridge, random forest.
//!
//! These work on encoded clinical vectors in `f64`; the feature-only
//! neural baseline is [`crate::fusion::ModelKind::FeatureOnly`].

mod forest;
mod qda;
mod ridge;

use serde::{Deserialize, Serialize};

pub use forest::{DecisionTree, RandomForest};
pub use qda::Qda;
pub use ridge::RidgeClassifier;

use crate::error::{Error, Result};
use crate::inference::Prediction;

pub trait Classifier {
    /// Class probabilities (sum to 1).
    fn predict_proba(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub qda_lambda: f64,
    pub ridge_lambda: f64,
    pub rf_trees: usize,
    pub rf_max_depth: usize,
    /// Features tried per split; `None` means `ceil(sqrt(D))`.
    pub rf_features: Option<usize>,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            qda_lambda: 1e-3,
            ridge_lambda: 1.0,
            rf_trees: 200,
            rf_max_depth: 12,
            rf_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Qda,
    Ridge,
    RandomForest,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Qda, BaselineKind::Ridge, BaselineKind::RandomForest];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Qda => "qda",
            BaselineKind::Ridge => "ridge",
            BaselineKind::RandomForest => "random_forest",
        }
    }
}

/// Fits the chosen baseline on rows `x` with labels `y` in `0..num_classes`.
pub fn fit_baseline(
    kind: BaselineKind,
    x: &[Vec<f64>],
    y: &[usize],
    num_classes: usize,
    cfg: &BaselineConfig,
) -> Result<Box<dyn Classifier + Send + Sync>> {
    Ok(match kind {
        BaselineKind::Qda => Box::new(Qda::fit(x, y, num_classes, cfg.qda_lambda)?),
        BaselineKind::Ridge => Box::new(RidgeClassifier::fit(x, y, num_classes, cfg.ridge_lambda)?),
        BaselineKind::RandomForest => Box::new(RandomForest::fit(
            x,
            y,
            num_classes,
            cfg.rf_trees,
            cfg.rf_max_depth,
            cfg.rf_features,
            cfg.seed,
        )?),
    })
}

/// Predictions for `(id, features, label)` rows.
pub fn predict_rows(model: &dyn Classifier, rows: &[(String, Vec<f64>, usize)]) -> Vec<Prediction> {
    rows.iter()
        .map(|(id, x, label)| Prediction::new(id.clone(), model.predict_proba(x), Some(*label)))
        .collect()
}

pub(crate) fn check_design(x: &[Vec<f64>], y: &[usize], num_classes: usize) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("{} rows vs {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("baseline fit", "rows must share a positive width"));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{num_classes}")));
    }
    Ok(d)
}

/// Softmax of log-scores.
pub(crate) fn normalize_log(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
