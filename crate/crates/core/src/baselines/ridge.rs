use nalgebra::{DMatrix, DVector};

use super::{check_design, normalize_log, Classifier};
use crate::error::{Error, Result};

/// One-vs-rest ridge regression on ±1 targets with unpenalized intercepts.
#[derive(Debug, Clone)]
pub struct RidgeClassifier {
    /// `K x D`.
    weights: DMatrix<f64>,
    intercepts: DVector<f64>,
    pub lambda: f64,
}

impl RidgeClassifier {
    pub fn fit(x: &[Vec<f64>], y: &[usize], num_classes: usize, lambda: f64) -> Result<Self> {
        let d = check_design(x, y, num_classes)?;
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("ridge lambda {lambda} must be positive")));
        }
        let n = x.len();
        let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
        let t = DMatrix::from_fn(n, num_classes, |i, c| if y[i] == c { 1.0 } else { -1.0 });
        let x_mean = xm.row_mean();
        let t_mean = t.row_mean();
        let xc = DMatrix::from_fn(n, d, |i, j| xm[(i, j)] - x_mean[j]);
        let tc = DMatrix::from_fn(n, num_classes, |i, c| t[(i, c)] - t_mean[c]);
        let mut gram = xc.transpose() * &xc;
        for i in 0..d {
            gram[(i, i)] += lambda;
        }
        let rhs = xc.transpose() * tc;
        let w = gram
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("ridge system not positive definite".into()))?
            .solve(&rhs);
        let weights = w.transpose();
        let intercepts = DVector::from_fn(num_classes, |c, _| t_mean[c] - (weights.row(c) * x_mean.transpose())[(0, 0)]);
        Ok(Self {
            weights,
            intercepts,
            lambda,
        })
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        (&self.weights * xv + &self.intercepts).iter().copied().collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::inference::argmax(&self.scores(x))
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }
}

impl Classifier for RidgeClassifier {
    /// Softmax of the regression scores (monotone, so argmax and AUC follow the scores).
    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        normalize_log(&self.scores(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imbalanced() -> (Vec<Vec<f64>>, Vec<usize>) {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let y = vec![0, 1, 1, 1, 2, 1, 0, 1, 2, 1];
        (x, y)
    }

    #[test]
    fn huge_lambda_predicts_majority() {
        let (x, y) = imbalanced();
        let r = RidgeClassifier::fit(&x, &y, 3, 1e12).unwrap();
        assert!(r.weights().iter().all(|w| w.abs() < 1e-9));
        assert!(x.iter().all(|row| r.predict(row) == 1));
    }

    #[test]
    fn separable_data_fits_exactly() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 - 9.5, (i % 3) as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let r = RidgeClassifier::fit(&x, &y, 2, 1e-3).unwrap();
        assert!(x.iter().zip(&y).all(|(row, &l)| r.predict(row) == l));
    }

    #[test]
    fn duplicated_data_with_doubled_lambda_is_unchanged() {
        let (x, y) = imbalanced();
        let a = RidgeClassifier::fit(&x, &y, 3, 0.7).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
        let b = RidgeClassifier::fit(&x2, &y2, 3, 1.4).unwrap();
        for row in &x {
            for (p, q) in a.scores(row).iter().zip(b.scores(row)) {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lambda_must_be_positive() {
        let (x, y) = imbalanced();
        assert!(RidgeClassifier::fit(&x, &y, 3, 0.0).is_err());
    }
}
