use nalgebra::{DMatrix, DVector};

use super::{check_design, normalize_log, Classifier};
use crate::error::{Error, Result};

/// Gaussian class-conditionals with per-class covariance `S_c + lambda I`.
#[derive(Debug, Clone)]
pub struct Qda {
    means: Vec<DVector<f64>>,
    /// Lower Cholesky factor of each regularized covariance.
    chol: Vec<DMatrix<f64>>,
    log_dets: Vec<f64>,
    log_priors: Vec<f64>,
}

impl Qda {
    pub fn fit(x: &[Vec<f64>], y: &[usize], num_classes: usize, lambda: f64) -> Result<Self> {
        let d = check_design(x, y, num_classes)?;
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("QDA regularization {lambda} must be non-negative")));
        }
        let mut out = Self {
            means: Vec::new(),
            chol: Vec::new(),
            log_dets: Vec::new(),
            log_priors: Vec::new(),
        };
        for c in 0..num_classes {
            let rows: Vec<&Vec<f64>> = x.iter().zip(y).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            if rows.len() < 2 {
                return Err(Error::InvalidArgument(format!("QDA needs >= 2 samples of class {c}, got {}", rows.len())));
            }
            let n = rows.len() as f64;
            let mean = rows.iter().fold(DVector::zeros(d), |acc, r| acc + DVector::from_column_slice(r)) / n;
            let mut cov = DMatrix::<f64>::zeros(d, d);
            for r in &rows {
                let diff = DVector::from_column_slice(r) - &mean;
                cov += &diff * diff.transpose();
            }
            cov /= n - 1.0;
            for i in 0..d {
                cov[(i, i)] += lambda;
            }
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::InvalidArgument(format!("class {c} covariance is singular; raise lambda")))?;
            let l = chol.l();
            out.log_dets.push(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>());
            out.chol.push(l);
            out.means.push(mean);
            out.log_priors.push((n / x.len() as f64).ln());
        }
        Ok(out)
    }

    /// Overrides the class priors (normalized internally).
    pub fn with_priors(mut self, priors: &[f64]) -> Result<Self> {
        let total: f64 = priors.iter().sum();
        if priors.len() != self.log_priors.len() || priors.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidArgument("one positive prior per class required".into()));
        }
        self.log_priors = priors.iter().map(|p| (p / total).ln()).collect();
        Ok(self)
    }

    pub fn discriminants(&self, x: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        (0..self.means.len())
            .map(|c| {
                let diff = &x - &self.means[c];
                let z = self.chol[c].solve_lower_triangular(&diff).expect("positive diagonal");
                -0.5 * self.log_dets[c] - 0.5 * z.norm_squared() + self.log_priors[c]
            })
            .collect()
    }
}

impl Classifier for Qda {
    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        normalize_log(&self.discriminants(x))
    }
}
