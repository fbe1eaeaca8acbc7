//! Training-set fitted imputation, one-hot encoding and min-max scaling.
//!
//! Encoding per kind:
//! * binary: one slot, 1 = present; missing counts as absent (0).
//! * categorical: one slot per vocabulary entry plus a trailing unknown
//!   slot that absorbs missing and unseen categories.
//! * continuous: missing replaced by the training mean, then
//!   `(x - min) / (max - min)` clipped to `[0, 1]`; a feature with
//!   `min == max` on the training set encodes as 0.5.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::schema::{ClinicalRecord, FeatureKind, RawValue, TypedFeatureSchema};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_DROP_THRESHOLD: f64 = 0.40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedFeature {
    Binary {
        name: String,
    },
    Categorical {
        name: String,
        vocab: Vec<String>,
    },
    Continuous {
        name: String,
        mean: f64,
        min: f64,
        max: f64,
    },
}

impl FittedFeature {
    pub fn name(&self) -> &str {
        match self {
            FittedFeature::Binary { name }
            | FittedFeature::Categorical { name, .. }
            | FittedFeature::Continuous { name, .. } => name,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            FittedFeature::Binary { .. } | FittedFeature::Continuous { .. } => 1,
            FittedFeature::Categorical { vocab, .. } => vocab.len() + 1,
        }
    }

    fn encode(&self, value: &RawValue, out: &mut Vec<f64>) {
        match self {
            FittedFeature::Binary { .. } => {
                out.push(if matches!(value, RawValue::Binary(true)) { 1.0 } else { 0.0 });
            }
            FittedFeature::Categorical { vocab, .. } => {
                let slot = match value {
                    RawValue::Category(c) => vocab.iter().position(|v| v == c).unwrap_or(vocab.len()),
                    _ => vocab.len(),
                };
                out.extend((0..=vocab.len()).map(|i| if i == slot { 1.0 } else { 0.0 }));
            }
            FittedFeature::Continuous { mean, min, max, .. } => {
                let x = match value {
                    RawValue::Number(x) => *x,
                    _ => *mean,
                };
                let scaled = if max > min { (x - min) / (max - min) } else { 0.5 };
                out.push(scaled.clamp(0.0, 1.0));
            }
        }
    }
}

/// Everything learned from the training records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPreprocessor {
    features: Vec<FittedFeature>,
    dropped: Vec<String>,
    dim: usize,
}

impl FittedPreprocessor {
    pub fn fit(records: &[ClinicalRecord], schema: &TypedFeatureSchema, drop_threshold: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("cannot fit a preprocessor on zero records".into()));
        }
        if !(drop_threshold > 0.0 && drop_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("drop threshold {drop_threshold} outside (0, 1)")));
        }
        let n = records.len() as f64;
        let mut features = Vec::new();
        let mut dropped = Vec::new();
        for spec in schema.features() {
            let missing = records.iter().filter(|r| r.value(&spec.name).is_missing()).count();
            if missing as f64 / n > drop_threshold {
                dropped.push(spec.name.clone());
                continue;
            }
            let fitted = match &spec.kind {
                FeatureKind::Binary => FittedFeature::Binary {
                    name: spec.name.clone(),
                },
                FeatureKind::Categorical { vocab } => FittedFeature::Categorical {
                    name: spec.name.clone(),
                    vocab: vocab.clone(),
                },
                FeatureKind::Continuous => {
                    let xs: Vec<f64> = records
                        .iter()
                        .filter_map(|r| match r.value(&spec.name) {
                            RawValue::Number(x) => Some(*x),
                            _ => None,
                        })
                        .collect();
                    if xs.is_empty() {
                        return Err(Error::Data(vec![format!(
                            "continuous feature `{}` has no observed training values",
                            spec.name
                        )]));
                    }
                    FittedFeature::Continuous {
                        name: spec.name.clone(),
                        mean: xs.iter().sum::<f64>() / xs.len() as f64,
                        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
                        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    }
                }
            };
            features.push(fitted);
        }
        let dim = features.iter().map(FittedFeature::width).sum();
        Ok(Self { features, dropped, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[FittedFeature] {
        &self.features
    }

    pub fn dropped(&self) -> &[String] {
        &self.dropped
    }

    /// Encoded coordinate ranges, one per retained raw feature.
    pub fn groups(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.features
            .iter()
            .map(|f| {
                let r = start..start + f.width();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn transform_f64(&self, record: &ClinicalRecord) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for f in &self.features {
            f.encode(record.value(f.name()), &mut out);
        }
        out
    }

    pub fn transform<T: Scalar>(&self, record: &ClinicalRecord) -> Vec<T> {
        self.transform_f64(record).into_iter().map(T::of).collect()
    }

    /// Coordinate-wise mean of the encoded training records.
    pub fn mean_vector(&self, training: &[ClinicalRecord]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for r in training {
            for (a, x) in acc.iter_mut().zip(self.transform_f64(r)) {
                *a += x;
            }
        }
        let n = training.len().max(1) as f64;
        acc.into_iter().map(|a| a / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use chrono::NaiveDateTime;

    use super::*;
    use crate::clinical::schema::{FeatureSpec, TIMESTAMP_FORMAT};

    fn ts() -> NaiveDateTime {
        NaiveDateTime::parse_from_str("2020-03-01T08:00:00", TIMESTAMP_FORMAT).unwrap()
    }

    fn rec(id: usize, vals: Vec<(&str, RawValue)>) -> ClinicalRecord {
        ClinicalRecord {
            subject_id: format!("s{id}"),
            timestamp: ts(),
            values: vals.into_iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>(),
        }
    }

    fn schema() -> TypedFeatureSchema {
        TypedFeatureSchema::new(vec![
            FeatureSpec {
                name: "copd".into(),
                kind: FeatureKind::Binary,
            },
            FeatureSpec {
                name: "smoking".into(),
                kind: FeatureKind::Categorical {
                    vocab: vec!["never".into(), "former".into(), "current".into()],
                },
            },
            FeatureSpec {
                name: "temperature".into(),
                kind: FeatureKind::Continuous,
            },
        ])
        .unwrap()
    }

    #[test]
    fn drop_threshold_boundary() {
        let s = TypedFeatureSchema::new(vec![
            FeatureSpec {
                name: "a".into(),
                kind: FeatureKind::Continuous,
            },
            FeatureSpec {
                name: "b".into(),
                kind: FeatureKind::Continuous,
            },
        ])
        .unwrap();
        // 100 records: `a` missing in 41, `b` missing in 39
        let records: Vec<_> = (0..100)
            .map(|i| {
                let a = if i < 41 { RawValue::Missing } else { RawValue::Number(i as f64) };
                let b = if i < 39 { RawValue::Missing } else { RawValue::Number(i as f64) };
                rec(i, vec![("a", a), ("b", b)])
            })
            .collect();
        let fitted = FittedPreprocessor::fit(&records, &s, DEFAULT_DROP_THRESHOLD).unwrap();
        assert_eq!(fitted.dropped(), &["a".to_string()]);
        assert_eq!(fitted.features().len(), 1);
        assert_eq!(fitted.features()[0].name(), "b");
    }

    #[test]
    fn exactly_at_threshold_is_kept() {
        let s = TypedFeatureSchema::new(vec![FeatureSpec {
            name: "a".into(),
            kind: FeatureKind::Binary,
        }])
        .unwrap();
        let records: Vec<_> = (0..10)
            .map(|i| {
                let a = if i < 4 { RawValue::Missing } else { RawValue::Binary(true) };
                rec(i, vec![("a", a)])
            })
            .collect();
        let fitted = FittedPreprocessor::fit(&records, &s, 0.4).unwrap();
        assert!(fitted.dropped().is_empty());
    }

    #[test]
    fn continuous_statistics_and_endpoints() {
        let records: Vec<_> = [95.0, 99.0, 105.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| rec(i, vec![("temperature", RawValue::Number(t))]))
            .collect();
        let f = FittedPreprocessor::fit(&records, &schema(), 0.4);
        // copd/smoking are missing in every record: both exceed 40%.
        let f = f.unwrap();
        assert_eq!(f.dropped(), &["copd".to_string(), "smoking".to_string()]);
        match &f.features()[0] {
            FittedFeature::Continuous { mean, min, max, .. } => {
                assert!((mean - 299.0 / 3.0).abs() < 1e-12);
                assert_eq!((*min, *max), (95.0, 105.0));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(f.transform_f64(&records[0]), vec![0.0]);
        assert_eq!(f.transform_f64(&records[2]), vec![1.0]);
    }

    #[test]
    fn missing_temperature_uses_training_mean() {
        let f = FittedPreprocessor {
            features: vec![FittedFeature::Continuous {
                name: "temperature".into(),
                mean: 99.15,
                min: 95.0,
                max: 105.0,
            }],
            dropped: vec![],
            dim: 1,
        };
        let v = f.transform_f64(&rec(0, vec![]));
        assert!((v[0] - 0.415).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_values_clip() {
        let f = FittedPreprocessor {
            features: vec![FittedFeature::Continuous {
                name: "t".into(),
                mean: 1.0,
                min: 0.0,
                max: 2.0,
            }],
            dropped: vec![],
            dim: 1,
        };
        assert_eq!(f.transform_f64(&rec(0, vec![("t", RawValue::Number(7.0))])), vec![1.0]);
        assert_eq!(f.transform_f64(&rec(0, vec![("t", RawValue::Number(-3.0))])), vec![0.0]);
    }

    #[test]
    fn degenerate_feature_encodes_half() {
        let records: Vec<_> = (0..4).map(|i| rec(i, vec![("t", RawValue::Number(3.0))])).collect();
        let s = TypedFeatureSchema::new(vec![FeatureSpec {
            name: "t".into(),
            kind: FeatureKind::Continuous,
        }])
        .unwrap();
        let f = FittedPreprocessor::fit(&records, &s, 0.4).unwrap();
        assert_eq!(f.transform_f64(&records[0]), vec![0.5]);
    }

    #[test]
    fn binary_and_categorical_imputation() {
        let records = vec![
            rec(
                0,
                vec![
                    ("copd", RawValue::Binary(true)),
                    ("smoking", RawValue::Category("former".into())),
                    ("temperature", RawValue::Number(98.0)),
                ],
            ),
            rec(1, vec![("copd", RawValue::Binary(false)), ("temperature", RawValue::Number(100.0))]),
            rec(2, vec![("smoking", RawValue::Category("never".into())), ("temperature", RawValue::Number(99.0))]),
        ];
        let f = FittedPreprocessor::fit(&records, &schema(), 0.4).unwrap();
        assert_eq!(f.dim(), 1 + 4 + 1);
        // missing smoking -> unknown slot; missing copd -> 0
        assert_eq!(f.transform_f64(&records[1])[1..5], [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(f.transform_f64(&records[2])[0], 0.0);
        // unseen category -> unknown slot
        let odd = rec(9, vec![("smoking", RawValue::Category("pipe".into()))]);
        assert_eq!(f.transform_f64(&odd)[1..5], [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(f.groups(), vec![0..1, 1..5, 5..6]);
    }

    #[test]
    fn refit_is_idempotent_and_mean_vector_brute_force() {
        let records = vec![
            rec(0, vec![("copd", RawValue::Binary(true)), ("temperature", RawValue::Number(98.0))]),
            rec(1, vec![("copd", RawValue::Binary(false)), ("temperature", RawValue::Number(100.0))]),
            rec(2, vec![("smoking", RawValue::Category("never".into())), ("copd", RawValue::Binary(false))]),
        ];
        let f = FittedPreprocessor::fit(&records, &schema(), 0.7).unwrap();
        assert_eq!(f, FittedPreprocessor::fit(&records, &schema(), 0.7).unwrap());
        let mean = f.mean_vector(&records);
        for (j, m) in mean.iter().enumerate() {
            let brute: f64 = records.iter().map(|r| f.transform_f64(r)[j]).sum::<f64>() / 3.0;
            assert!((m - brute).abs() < 1e-15);
        }
        assert!((mean[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fit_rejects_empty_and_bad_threshold() {
        assert!(FittedPreprocessor::fit(&[], &schema(), 0.4).is_err());
        assert!(FittedPreprocessor::fit(&[rec(0, vec![])], &schema(), 1.0).is_err());
    }
}
