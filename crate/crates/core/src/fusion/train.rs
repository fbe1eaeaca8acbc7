//! Mini-batch SGD training with class-weighted loss and early stopping.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelKind, TrainSpec, NUM_CLASSES};
use super::model::{FusionModel, ImageInput};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One subject as seen by the trainer.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub id: String,
    pub image: Option<Arc<Tensor<T>>>,
    pub clinical: Vec<T>,
    pub label: usize,
}

/// `alpha_c = N / (K * n_c)`: inverse class frequency, unit weights when balanced.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() || counts.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("class counts must all be positive, got {counts:?}")));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|&n| total as f64 / (k * n as f64)).collect())
}

pub fn label_counts<T>(samples: &[Sample<T>], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Backbone frozen; branches and head trained.
    Frozen,
    /// Everything trainable.
    Finetune,
    /// Single-stage end-to-end training (image-only / feature-only models).
    Single,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Frozen => 1,
            Stage::Finetune => 2,
            Stage::Single => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHistory {
    pub stage: Stage,
    /// Validation loss of the weights the stage started from.
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// 0 when no epoch improved on the starting weights.
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl StageHistory {
    /// History as JSON lines (`epoch`, `train_loss`, `val_loss`, `stage`).
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain struct") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based stopping on a strictly decreasing validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, baseline: f64) -> Self {
        Self {
            patience,
            best: baseline,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Inputs for one forward pass, with stage-1 pooled-feature caching.
struct PreparedSet<'a, T> {
    samples: &'a [Sample<T>],
    pooled: Option<Vec<Vec<T>>>,
}

impl<'a, T: Scalar> PreparedSet<'a, T> {
    fn new(model: &FusionModel<T>, samples: &'a [Sample<T>], cache_backbone: bool) -> Result<Self> {
        let pooled = if cache_backbone && model.kind().uses_image() {
            Some(
                samples
                    .iter()
                    .map(|s| model.pooled_features(image_of(s)?))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self { samples, pooled })
    }

    fn image(&self, i: usize) -> Result<Option<ImageInput<'_, T>>> {
        if let Some(p) = &self.pooled {
            return Ok(Some(ImageInput::Pooled(&p[i])));
        }
        match &self.samples[i].image {
            Some(t) => Ok(Some(ImageInput::Pixels(t))),
            None => Ok(None),
        }
    }
}

fn image_of<T>(s: &Sample<T>) -> Result<&Tensor<T>> {
    s.image
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("sample `{}` has no image", s.id)))
}

fn inputs<'s, T: Scalar>(
    model: &FusionModel<T>,
    set: &'s PreparedSet<'_, T>,
    i: usize,
) -> Result<(Option<ImageInput<'s, T>>, Option<&'s [T]>)> {
    let image = if model.kind().uses_image() { set.image(i)? } else { None };
    let clinical = model.kind().uses_clinical().then(|| set.samples[i].clinical.as_slice());
    Ok((image, clinical))
}

const EVAL_CHUNK: usize = 32;

/// Mean class-weighted loss in eval mode.
fn eval_loss<T: Scalar>(model: &FusionModel<T>, set: &PreparedSet<'_, T>, weights: &[T]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk_start in (0..set.samples.len()).step_by(EVAL_CHUNK) {
        let mut g = Graph::new();
        for i in chunk_start..(chunk_start + EVAL_CHUNK).min(set.samples.len()) {
            let (img, clin) = inputs(model, set, i)?;
            let f = model.forward_graph(&mut g, img, clin, false, &mut rng)?;
            let label = set.samples[i].label;
            let l = g.weighted_softmax_ce(f.logits, label, weights[label])?;
            total += g.value(l).data()[0].as_f64();
        }
    }
    Ok(total / set.samples.len() as f64)
}

/// Eval-mode validation loss of the current weights (inverse-frequency
/// weights from `train` unless `TrainSpec::class_weights` is set).
pub fn validation_loss<T: Scalar>(
    model: &FusionModel<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    spec: &TrainSpec,
) -> Result<f64> {
    let weights = resolve_weights(spec, train)?;
    let set = PreparedSet::new(model, val, false)?;
    eval_loss(model, &set, &weights.iter().map(|&a| T::of(a)).collect::<Vec<_>>())
}

fn resolve_weights<T>(spec: &TrainSpec, train: &[Sample<T>]) -> Result<Vec<f64>> {
    match &spec.class_weights {
        Some(w) => Ok(w.clone()),
        None => class_weights(&label_counts(train, NUM_CLASSES)),
    }
}

/// Runs one stage and leaves the best-validation weights in `model`.
pub fn run_stage<T: Scalar>(
    model: &mut FusionModel<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    spec: &TrainSpec,
    stage: Stage,
) -> Result<StageHistory> {
    spec.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.label >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("sample `{}` has label {}", s.id, s.label)));
    }
    let weights_f64 = resolve_weights(spec, train)?;
    let weights: Vec<T> = weights_f64.iter().map(|&a| T::of(a)).collect();

    match stage {
        Stage::Frozen => model.freeze_backbone(true),
        Stage::Finetune | Stage::Single => model.params.unfreeze_all(),
    }
    model.params.reset_momentum();
    let frozen_backbone = stage == Stage::Frozen;
    let train_set = PreparedSet::new(model, train, frozen_backbone)?;
    let val_set = PreparedSet::new(model, val, frozen_backbone)?;

    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ (0x5eed_0000 + stage.number() as u64));
    let (lr, momentum) = (T::of(spec.lr), T::of(spec.momentum));

    let initial = eval_loss(model, &val_set, &weights)?;
    let mut stopper = EarlyStopping::new(spec.patience, initial);
    let mut best = model.params.values_snapshot();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=spec.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, clin) = inputs(model, &train_set, i)?;
                let f = model.forward_graph(&mut g, img, clin, true, &mut rng)?;
                let label = train[i].label;
                losses.push(g.weighted_softmax_ce(f.logits, label, weights[label])?);
            }
            let loss = g.mean(&losses)?;
            loss_sum += g.value(loss).data()[0].as_f64() * batch.len() as f64;
            g.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&g);
            model.params.sgd_momentum_step(lr, momentum)?;
        }
        if !model.params.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite weights after epoch {epoch}; lower the learning rate")));
        }
        let val_loss = eval_loss(model, &val_set, &weights)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            stage,
        };
        log::debug!("{stage:?} epoch {epoch}: train {:.4} val {:.4}", record.train_loss, val_loss);
        epochs.push(record);
        match stopper.update(epoch, val_loss) {
            StopDecision::Improved => best = model.params.values_snapshot(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    model.params.restore_snapshot(&best);
    model.stage_reached = model.stage_reached.max(match stage {
        Stage::Frozen => 1,
        Stage::Finetune | Stage::Single => 2,
    });
    Ok(StageHistory {
        stage,
        initial_val_loss: initial,
        best_val_loss: stopper.best(),
        best_epoch: stopper.best_epoch(),
        epochs,
        stopped_early,
    })
}

/// Stage 1: backbone frozen, clinical branch, projection and head trained.
pub fn train_stage1<T: Scalar>(
    model: &mut FusionModel<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    spec: &TrainSpec,
) -> Result<StageHistory> {
    if model.kind() != ModelKind::Fusion {
        return Err(Error::InvalidArgument("two-stage training applies to fusion models".into()));
    }
    run_stage(model, train, val, spec, Stage::Frozen)
}

/// Stage 2: everything unfrozen and fine-tuned.
pub fn train_stage2<T: Scalar>(
    model: &mut FusionModel<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    spec: &TrainSpec,
) -> Result<StageHistory> {
    if model.kind() != ModelKind::Fusion {
        return Err(Error::InvalidArgument("two-stage training applies to fusion models".into()));
    }
    if model.stage_reached < 1 {
        return Err(Error::InvalidArgument("stage 2 requires a completed stage 1".into()));
    }
    run_stage(model, train, val, spec, Stage::Finetune)
}

/// End-to-end training of a single-branch model (image-only or feature-only).
pub fn train_single<T: Scalar>(
    model: &mut FusionModel<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    spec: &TrainSpec,
) -> Result<StageHistory> {
    if model.kind() == ModelKind::Fusion {
        return Err(Error::InvalidArgument("fusion models train in two stages".into()));
    }
    run_stage(model, train, val, spec, Stage::Single)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::config::{BackboneStyle, FusionConfig};
    use crate::fusion::model::BACKBONE_PREFIX;
    use rand::Rng;

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&[476, 663, 518]).unwrap();
        for (a, b) in w.iter().zip([1.1604, 0.8331, 1.0663]) {
            assert!((a - b).abs() < 1e-4, "{w:?}");
        }
        assert_eq!(class_weights(&[10, 10, 10]).unwrap(), vec![1.0; 3]);
        let w = class_weights(&[1, 1, 2]).unwrap();
        for (a, b) in w.iter().zip([4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(class_weights(&[3, 0, 2]).is_err());
    }

    #[test]
    fn early_stopping_stops_at_e_plus_patience() {
        for (e, patience) in [(5, 8), (1, 1), (12, 3)] {
            let mut s = EarlyStopping::new(patience, f64::INFINITY);
            let mut stop = None;
            for epoch in 1..=100 {
                let loss = if epoch <= e { 1.0 / epoch as f64 } else { 1.0 / e as f64 };
                if s.update(epoch, loss) == StopDecision::Stop {
                    stop = Some(epoch);
                    break;
                }
            }
            assert_eq!(stop, Some(e + patience));
            assert_eq!(s.best_epoch(), e);
        }
    }

    /// Class encoded in both an image quadrant and one clinical coordinate.
    fn separable(n: usize, size: usize, seed: u64) -> Vec<Sample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 3;
                let mut data = vec![0.0; 3 * size * size];
                for c in 0..3 {
                    for r in 0..size {
                        for col in 0..size {
                            let hot = match label {
                                0 => r < size / 2 && col < size / 2,
                                1 => r >= size / 2 && col >= size / 2,
                                _ => false,
                            };
                            data[(c * size + r) * size + col] = if hot { 1.5 } else { -0.5 } + rng.gen_range(-0.1..0.1);
                        }
                    }
                }
                let mut clinical = vec![0.0; 3];
                clinical[label] = 1.0;
                Sample {
                    id: format!("s{i}"),
                    image: Some(Arc::new(Tensor::new(vec![3, size, size], data).unwrap())),
                    clinical,
                    label,
                }
            })
            .collect()
    }

    fn fast_spec() -> TrainSpec {
        TrainSpec {
            lr: 0.01,
            max_epochs: 6,
            patience: 3,
            batch_size: 8,
            ..TrainSpec::default()
        }
    }

    fn fusion(seed: u64) -> FusionModel<f64> {
        FusionModel::new(FusionConfig::new(ModelKind::Fusion, BackboneStyle::Plain, 8, 3, seed)).unwrap()
    }

    #[test]
    fn stage1_keeps_backbone_bit_identical() {
        let data = separable(24, 8, 1);
        let mut m = fusion(2);
        let before = m.params.digest(|n| n.starts_with(BACKBONE_PREFIX));
        let head_before = m.params.digest(|n| n.starts_with("head/"));
        train_stage1(&mut m, &data[..18], &data[18..], &fast_spec()).unwrap();
        assert_eq!(m.params.digest(|n| n.starts_with(BACKBONE_PREFIX)), before);
        assert_ne!(m.params.digest(|n| n.starts_with("head/")), head_before);
        assert_eq!(m.stage_reached, 1);
    }

    #[test]
    fn training_reduces_val_loss_and_stage2_never_worsens() {
        for seed in 0..5 {
            let data = separable(30, 8, 10 + seed);
            let (train, val) = data.split_at(21);
            let mut m = fusion(seed);
            let h1 = train_stage1(&mut m, train, val, &fast_spec()).unwrap();
            let final1 = validation_loss(&m, train, val, &fast_spec()).unwrap();
            assert!(final1 < h1.initial_val_loss, "seed {seed}: {final1} vs {}", h1.initial_val_loss);
            assert_eq!(final1, h1.best_val_loss);
            let h2 = train_stage2(&mut m, train, val, &fast_spec()).unwrap();
            assert!(h2.best_val_loss <= h1.best_val_loss);
            assert!(m.params.iter().all(|(_, p)| !p.is_frozen()));
            let after = h2.epochs.len() - h2.best_epoch;
            assert!(after <= fast_spec().patience);
        }
    }

    #[test]
    fn stage2_updates_backbone_and_requires_stage1() {
        let data = separable(12, 8, 3);
        let mut m = fusion(4);
        let spec = TrainSpec {
            max_epochs: 1,
            patience: 1,
            ..fast_spec()
        };
        assert!(train_stage2(&mut m, &data[..9], &data[9..], &spec).is_err());
        m.stage_reached = 1;
        let snap = m.params.values_snapshot();
        // One step on the raw parameters, bypassing best-restore.
        m.params.unfreeze_all();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = data[0].image.clone().unwrap();
        let f = m
            .forward_graph(&mut g, Some(ImageInput::Pixels(&img)), Some(&data[0].clinical), true, &mut rng)
            .unwrap();
        let l = g.weighted_softmax_ce(f.logits, data[0].label, 1.0).unwrap();
        g.backward(l).unwrap();
        m.params.accumulate_grads(&g);
        m.params.sgd_momentum_step(0.01, 0.9).unwrap();
        let changed = m
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(BACKBONE_PREFIX))
            .any(|(n, p)| p.value != snap[n]);
        assert!(changed);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = separable(6, 8, 3);
        let mut m = fusion(0);
        assert!(train_stage1(&mut m, &[], &data, &fast_spec()).is_err());
        assert!(train_stage1(&mut m, &data, &[], &fast_spec()).is_err());
        assert!(train_single(&mut m, &data, &data, &fast_spec()).is_err());
        let mut img_only = FusionModel::new(FusionConfig::new(ModelKind::ImageOnly, BackboneStyle::Plain, 8, 0, 0)).unwrap();
        assert!(train_stage1(&mut img_only, &data, &data, &fast_spec()).is_err());
    }

    #[test]
    fn history_jsonl_has_one_line_per_epoch() {
        let data = separable(12, 8, 5);
        let mut m = FusionModel::new(FusionConfig::new(ModelKind::FeatureOnly, BackboneStyle::Plain, 8, 3, 1)).unwrap();
        let h = train_single(&mut m, &data[..9], &data[9..], &fast_spec()).unwrap();
        let text = h.to_jsonl();
        assert_eq!(text.lines().count(), h.epochs.len());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["stage"], "single");
        assert!(first["val_loss"].is_number());
    }
}
