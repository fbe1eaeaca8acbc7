//! Test-time modality regimes, ensembles and prediction files.

use std::io::{Read, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fusion::{Checkpoint, FusionModel, ImageInput, Sample, NUM_CLASSES};
use crate::scalar::Scalar;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["low", "intermediate", "high"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModalityMode {
    Full,
    /// Subject image with the training-mean clinical vector.
    FusionImageOnly,
    /// Cached neutral image with the subject's clinical vector.
    FusionFeatureOnly,
    /// Subject image; a `fraction` of clinical groups keep subject values.
    PartialClinical { fraction: f64, seed: u64 },
}

impl ModalityMode {
    pub fn partial(fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("clinical fraction {fraction} outside [0, 1]")));
        }
        Ok(ModalityMode::PartialClinical { fraction, seed })
    }

    pub fn label(&self) -> String {
        match self {
            ModalityMode::Full => "full".into(),
            ModalityMode::FusionImageOnly => "image-only".into(),
            ModalityMode::FusionFeatureOnly => "feature-only".into(),
            ModalityMode::PartialClinical { fraction, .. } => format!("partial:{fraction}"),
        }
    }

    pub fn needs_neutral_image(&self) -> bool {
        matches!(self, ModalityMode::FusionFeatureOnly)
    }
}

impl std::str::FromStr for ModalityMode {
    type Err = Error;

    /// `full`, `image-only`, `feature-only` or `partial:P` (seed 0; see [`ModalityMode::partial`]).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModalityMode::Full),
            "image-only" | "fusion_image_only" => Ok(ModalityMode::FusionImageOnly),
            "feature-only" | "fusion_feature_only" => Ok(ModalityMode::FusionFeatureOnly),
            other => {
                let p = other
                    .strip_prefix("partial:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown mode `{other}` (full|image-only|feature-only|partial:P)")))?;
                ModalityMode::partial(p, 0).map_err(|e| Error::Config(e.to_string()))
            }
        }
    }
}

/// `max_k |p_k - 1/K|`.
pub fn distance_to_uniform(probs: &[f64]) -> f64 {
    let u = 1.0 / probs.len() as f64;
    probs.iter().map(|p| (p - u).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralImageSelection {
    pub id: String,
    pub probs: Vec<f64>,
    pub score: f64,
}

/// Picks the candidate closest to uniform; equal scores go to the smaller id.
pub fn select_most_uniform(candidates: &[(String, Vec<f64>)]) -> Result<NeutralImageSelection> {
    candidates
        .iter()
        .map(|(id, p)| (distance_to_uniform(p), id, p))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(score, id, p)| NeutralImageSelection {
            id: id.clone(),
            probs: p.clone(),
            score,
        })
        .ok_or_else(|| Error::InvalidArgument("neutral image selection needs at least one candidate".into()))
}

/// Scores every training image with the mean clinical vector and keeps the
/// most uniform prediction.
pub fn select_neutral_image<T: Scalar>(
    model: &FusionModel<T>,
    candidates: &[(String, &Tensor<T>)],
    mean_clinical: &[f64],
) -> Result<NeutralImageSelection> {
    let clinical: Vec<T> = mean_clinical.iter().map(|&x| T::of(x)).collect();
    let scored = candidates
        .iter()
        .map(|(id, img)| {
            let p = model.predict_proba(Some(ImageInput::Pixels(img)), Some(&clinical))?;
            Ok((id.clone(), p.iter().map(|x| x.as_f64()).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    select_most_uniform(&scored)
}

/// Group indices kept at fraction `p`: the first `ceil(p * G)` entries of a
/// seeded permutation, so a larger `p` keeps a superset.
pub fn kept_groups(num_groups: usize, p: f64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_groups).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((p * num_groups as f64).ceil() as usize).min(num_groups);
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// Replaces every group outside the kept subset with the mean vector's values.
pub fn mask_clinical_subset<T: Scalar>(
    encoded: &[T],
    groups: &[Range<usize>],
    mean: &[f64],
    p: f64,
    seed: u64,
) -> Result<Vec<T>> {
    if encoded.len() != mean.len() || groups.last().map_or(0, |g| g.end) != encoded.len() {
        return Err(Error::shape(
            "mask_clinical_subset",
            format!("vector {} / mean {} / groups do not line up", encoded.len(), mean.len()),
        ));
    }
    let kept = kept_groups(groups.len(), p, seed);
    let mut out: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    for g in kept {
        let r = groups[g].clone();
        out[r.clone()].copy_from_slice(&encoded[r]);
    }
    Ok(out)
}

/// Coordinate-wise (optionally weighted) mean of probability vectors.
pub fn ensemble_average(probs: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let first = probs.first().ok_or_else(|| Error::InvalidArgument("ensemble of zero models".into()))?;
    if probs.iter().any(|p| p.len() != first.len()) {
        return Err(Error::shape("ensemble_average", "probability vectors differ in length"));
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() != probs.len() || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 => {
            return Err(Error::InvalidArgument("ensemble weights must be non-negative, one per model".into()))
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; probs.len()],
    };
    let total: f64 = w.iter().sum();
    let mut out = vec![0.0; first.len()];
    for (p, wi) in probs.iter().zip(&w) {
        for (o, x) in out.iter_mut().zip(p) {
            *o += wi * x;
        }
    }
    Ok(out.into_iter().map(|x| x / total).collect())
}

/// Index of the largest entry (first on ties).
pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Resolves one checkpoint's inputs under a mode.
pub struct Predictor<'a, T> {
    ckpt: &'a Checkpoint<T>,
    mode: ModalityMode,
    mean: Option<Vec<T>>,
    groups: Vec<Range<usize>>,
    neutral_pooled: Option<Vec<T>>,
}

impl<'a, T: Scalar> Predictor<'a, T> {
    pub fn new(ckpt: &'a Checkpoint<T>, mode: ModalityMode) -> Result<Self> {
        let kind = ckpt.model.kind();
        let needs_mean = kind.uses_clinical() && matches!(mode, ModalityMode::FusionImageOnly | ModalityMode::PartialClinical { .. });
        let mean = match (&ckpt.mean_clinical, needs_mean) {
            (Some(m), _) => Some(m.iter().map(|&x| T::of(x)).collect()),
            (None, true) => {
                return Err(Error::Missing(format!(
                    "mode {} needs the training-mean clinical vector, which the checkpoint lacks",
                    mode.label()
                )))
            }
            (None, false) => None,
        };
        let neutral_pooled = if mode.needs_neutral_image() && kind.uses_image() {
            let (_, img) = ckpt.neutral_image.as_ref().ok_or_else(|| {
                Error::Missing(format!(
                    "mode {} needs a neutral image; run `eval --cache-neutral-image` on this checkpoint first",
                    mode.label()
                ))
            })?;
            Some(ckpt.model.pooled_features(img)?)
        } else {
            None
        };
        let groups = match &ckpt.preprocessor {
            Some(p) => p.groups(),
            None => (0..ckpt.model.config.clinical_input_dim).map(|i| i..i + 1).collect(),
        };
        Ok(Self {
            ckpt,
            mode,
            mean,
            groups,
            neutral_pooled,
        })
    }

    pub fn predict(&self, image: Option<&Tensor<T>>, clinical: &[T]) -> Result<Vec<f64>> {
        let model = &self.ckpt.model;
        let kind = model.kind();
        let clinical_in: Vec<T> = match self.mode {
            ModalityMode::Full | ModalityMode::FusionFeatureOnly => clinical.to_vec(),
            _ if !kind.uses_clinical() => Vec::new(),
            ModalityMode::FusionImageOnly => self.mean.clone().expect("checked at construction"),
            ModalityMode::PartialClinical { fraction, seed } => {
                let mean: Vec<f64> = self.mean.as_ref().expect("checked").iter().map(|x| x.as_f64()).collect();
                mask_clinical_subset(clinical, &self.groups, &mean, fraction, seed)?
            }
        };
        let image_in = if !kind.uses_image() {
            None
        } else if let Some(p) = &self.neutral_pooled {
            Some(ImageInput::Pooled(p))
        } else {
            Some(ImageInput::Pixels(
                image.ok_or_else(|| Error::InvalidArgument("subject has no image".into()))?,
            ))
        };
        let clin = kind.uses_clinical().then_some(clinical_in.as_slice());
        Ok(model.predict_proba(image_in, clin)?.into_iter().map(|x| x.as_f64()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub probs: Vec<f64>,
    pub pred_label: usize,
    pub true_label: Option<usize>,
}

impl Prediction {
    pub fn new(subject_id: String, probs: Vec<f64>, true_label: Option<usize>) -> Self {
        Self {
            pred_label: argmax(&probs),
            subject_id,
            probs,
            true_label,
        }
    }
}

/// Predictions of one model, or the averaged predictions of several, for every sample.
pub fn predict_samples<T: Scalar>(
    ckpts: &[&Checkpoint<T>],
    samples: &[Sample<T>],
    mode: ModalityMode,
    weights: Option<&[f64]>,
) -> Result<Vec<Prediction>> {
    let predictors = ckpts.iter().map(|c| Predictor::new(c, mode)).collect::<Result<Vec<_>>>()?;
    if predictors.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints given".into()));
    }
    samples
        .iter()
        .map(|s| {
            let each = predictors
                .iter()
                .map(|p| p.predict(s.image.as_deref(), &s.clinical))
                .collect::<Result<Vec<_>>>()?;
            Ok(Prediction::new(s.id.clone(), ensemble_average(&each, weights)?, Some(s.label)))
        })
        .collect()
}

/// `subject_id,p_low,p_intermediate,p_high,pred_label,true_label`.
pub fn write_predictions<W: Write>(w: W, preds: &[Prediction]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["subject_id", "p_low", "p_intermediate", "p_high", "pred_label", "true_label"])?;
    for p in preds {
        let mut row = vec![p.subject_id.clone()];
        row.extend(p.probs.iter().map(|x| x.to_string()));
        row.push(p.pred_label.to_string());
        row.push(p.true_label.map(|l| l.to_string()).unwrap_or_default());
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_predictions<R: Read>(r: R) -> Result<Vec<Prediction>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed = (|| -> Option<Prediction> {
            let probs = (1..4).map(|i| rec.get(i)?.parse().ok()).collect::<Option<Vec<f64>>>()?;
            let pred_label = rec.get(4)?.parse().ok()?;
            let true_label = match rec.get(5)? {
                "" => None,
                s => Some(s.parse().ok()?),
            };
            Some(Prediction {
                subject_id: rec.get(0)?.to_string(),
                probs,
                pred_label,
                true_label,
            })
        })();
        match parsed {
            Some(p) => out.push(p),
            None => problems.push(format!("prediction row {}: malformed", line + 2)),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Data(problems))
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::fusion::{BackboneStyle, FusionConfig, ModelKind};
    use rand::Rng;

    fn ckpt(seed: u64) -> Checkpoint<f64> {
        let m = FusionModel::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::Plain, 8, 4, seed)).unwrap();
        let mut c = Checkpoint::new(m);
        c.mean_clinical = Some(vec![0.5, 0.25, 0.1, 0.9]);
        c
    }

    fn img(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn partial_endpoints_match_other_modes() {
        let c = ckpt(1);
        let x = img(0);
        let clin = [0.9, 0.0, 1.0, 0.3];
        let full = Predictor::new(&c, ModalityMode::Full).unwrap().predict(Some(&x), &clin).unwrap();
        let p1 = Predictor::new(&c, ModalityMode::partial(1.0, 5).unwrap()).unwrap().predict(Some(&x), &clin).unwrap();
        assert_eq!(full, p1);
        let io = Predictor::new(&c, ModalityMode::FusionImageOnly).unwrap().predict(Some(&x), &clin).unwrap();
        let p0 = Predictor::new(&c, ModalityMode::partial(0.0, 5).unwrap()).unwrap().predict(Some(&x), &clin).unwrap();
        assert_eq!(io, p0);
        let other = Predictor::new(&c, ModalityMode::FusionImageOnly).unwrap().predict(Some(&x), &[0.0; 4]).unwrap();
        assert_eq!(io, other);
    }

    #[test]
    fn feature_only_needs_neutral_image_and_ignores_subject_image() {
        let mut c = ckpt(2);
        let err = Predictor::new(&c, ModalityMode::FusionFeatureOnly).err().unwrap();
        assert!(err.to_string().contains("--cache-neutral-image"), "{err}");
        c.neutral_image = Some(("n".into(), img(9)));
        let p = Predictor::new(&c, ModalityMode::FusionFeatureOnly).unwrap();
        let a = p.predict(Some(&img(1)), &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = p.predict(Some(&img(2)), &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(a, b);
        let d = p.predict(Some(&img(2)), &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn neutral_selection_examples() {
        let third = 1.0 / 3.0;
        let s = select_most_uniform(&[("b".into(), vec![0.5, 0.3, 0.2]), ("a".into(), vec![third; 3])]).unwrap();
        assert_eq!((s.id.as_str(), s.score), ("a", 0.0));
        let s = select_most_uniform(&[("x".into(), vec![0.9, 0.05, 0.05])]).unwrap();
        assert!((s.score - 0.566_666_666_7).abs() < 1e-9);
        let s = select_most_uniform(&[("z".into(), vec![0.5, 0.25, 0.25]), ("m".into(), vec![0.25, 0.5, 0.25])]).unwrap();
        assert_eq!(s.id, "m");
        assert!(select_most_uniform(&[]).is_err());
    }

    #[test]
    fn neutral_selection_on_model_is_argmin() {
        let c = ckpt(3);
        let imgs: Vec<Tensor<f64>> = (0..6).map(img).collect();
        let cands: Vec<(String, &Tensor<f64>)> = imgs.iter().enumerate().map(|(i, t)| (format!("s{i}"), t)).collect();
        let sel = select_neutral_image(&c.model, &cands, c.mean_clinical.as_ref().unwrap()).unwrap();
        let p = Predictor::new(&c, ModalityMode::FusionImageOnly).unwrap();
        for (_, t) in &cands {
            assert!(distance_to_uniform(&p.predict(Some(t), &[0.0; 4]).unwrap()) >= sel.score);
        }
    }

    #[test]
    fn masking_rules() {
        let groups = vec![0..1, 1..3, 3..4];
        let mean = [0.5, 0.2, 0.8, 0.1];
        let x = [1.0, 0.0, 1.0, 0.7];
        assert_eq!(mask_clinical_subset(&x, &groups, &mean, 1.0, 3).unwrap(), x.to_vec());
        assert_eq!(mask_clinical_subset(&x, &groups, &mean, 0.0, 3).unwrap(), mean.to_vec());
        assert_eq!(kept_groups(10, 0.25, 7).len(), 3);
        let m = mask_clinical_subset(&x, &groups, &mean, 0.5, 1).unwrap();
        // one-hot block moves as a unit
        assert!(m[1..3] == x[1..3] || m[1..3] == mean[1..3]);
        assert!(mask_clinical_subset(&x[..3], &groups, &mean, 0.5, 1).is_err());
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_average(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], None).unwrap(), vec![0.5, 0.5, 0.0]);
        let v = vec![0.2, 0.3, 0.5];
        assert_eq!(ensemble_average(&[v.clone(), v.clone()], None).unwrap(), v);
        let w = ensemble_average(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], Some(&[3.0, 1.0])).unwrap();
        assert_eq!(w, vec![0.75, 0.25, 0.0]);
        assert!(ensemble_average(&[], None).is_err());
        assert!(ensemble_average(&[v.clone()], Some(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("partial:0.25".parse::<ModalityMode>().unwrap(), ModalityMode::partial(0.25, 0).unwrap());
        assert_eq!("image-only".parse::<ModalityMode>().unwrap(), ModalityMode::FusionImageOnly);
        assert!("partial:1.5".parse::<ModalityMode>().is_err());
        assert!("bogus".parse::<ModalityMode>().is_err());
    }

    #[test]
    fn ensemble_predictions_and_csv_round_trip() {
        let (a, b) = (ckpt(4), ckpt(5));
        let samples: Vec<Sample<f64>> = (0..4)
            .map(|i| Sample {
                id: format!("p{i}"),
                image: Some(Arc::new(img(i))),
                clinical: vec![0.1 * i as f64; 4],
                label: (i % 3) as usize,
            })
            .collect();
        let preds = predict_samples(&[&a, &b], &samples, ModalityMode::Full, None).unwrap();
        for p in &preds {
            assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let swapped = predict_samples(&[&b, &a], &samples, ModalityMode::Full, None).unwrap();
        for (p, q) in preds.iter().zip(&swapped) {
            for (x, y) in p.probs.iter().zip(&q.probs) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("subject_id,p_low,p_intermediate,p_high,pred_label,true_label\n"));
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), preds);
    }
}
