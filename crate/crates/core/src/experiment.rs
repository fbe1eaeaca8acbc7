//! End-to-end synthetic protocol: per seed, train image-only members, fusion
//! members initialized from them, and a feature-only network, then score
//! every arm under every modality mode on the held-out split.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_baseline, predict_rows, BaselineConfig, BaselineKind};
use crate::clinical::DEFAULT_DROP_THRESHOLD;
use crate::error::{Error, Result};
use crate::fusion::{
    train_single, train_stage1, train_stage2, BackboneStyle, Checkpoint, FusionConfig, FusionModel, ImageFeatDim,
    ModelKind, TrainSpec,
};
use crate::image::ImagePipeline;
use crate::inference::{predict_samples, select_neutral_image, ModalityMode, Prediction};
use crate::scalar::Scalar;
use crate::stats::{spearman, MetricReport};
use crate::synth::{generate, PreparedData, SynthConfig};

/// Arm names used as keys in [`SeedResult::reports`].
pub const FUSION_ENSEMBLE: &str = "fusion_ensemble";
pub const IMAGE_ONLY_ENSEMBLE: &str = "image_only_ensemble";
pub const FEATURE_ONLY_DNN: &str = "feature_only_dnn";
pub const FUSION_IMAGE_ONLY: &str = "fusion_image_only";
pub const FUSION_FEATURE_ONLY: &str = "fusion_feature_only";

pub fn partial_arm(fraction: f64) -> String {
    format!("partial_{fraction:.1}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSpec {
    /// One ensemble member per style.
    pub styles: Vec<BackboneStyle>,
    pub image_feat_dim: ImageFeatDim,
    pub train: TrainSpec,
    pub drop_threshold: f64,
    /// Clinical fractions for the partial-availability sweep.
    pub fractions: Vec<f64>,
    pub run_baselines: bool,
    pub baselines: BaselineConfig,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl ProtocolSpec {
    /// Short-budget preset for randomly initialized backbones on one CPU core.
    pub fn desk() -> Self {
        Self {
            styles: BackboneStyle::ALL.to_vec(),
            image_feat_dim: ImageFeatDim::Projected(64),
            train: desk_train_spec(),
            drop_threshold: DEFAULT_DROP_THRESHOLD,
            fractions: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            run_baselines: true,
            baselines: BaselineConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles.is_empty() {
            return Err(Error::Config("protocol needs at least one backbone style".into()));
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("sweep fractions must lie in [0, 1]".into()));
        }
        self.train.validate()
    }
}

pub fn desk_train_spec() -> TrainSpec {
    TrainSpec {
        lr: 0.01,
        momentum: 0.9,
        batch_size: 16,
        patience: 4,
        max_epochs: 20,
        class_weights: None,
    }
}

/// Seed of ensemble member `index` within run `seed`.
pub fn member_seed(seed: u64, index: usize) -> u64 {
    seed * 100 + index as u64
}

/// Attaches the fitted transforms to a trained model; `neutral` also caches
/// the stand-in image needed by the fusion-feature-only mode.
pub fn package<T: Scalar>(model: FusionModel<T>, data: &PreparedData<T>, neutral: bool) -> Result<Checkpoint<T>> {
    let mut ckpt = Checkpoint::new(model);
    ckpt.class_weights = crate::fusion::class_weights(&crate::fusion::label_counts(&data.train, 3))?;
    ckpt.image_pipeline = Some(data.pipeline.clone());
    ckpt.preprocessor = Some(data.preprocessor.clone());
    ckpt.mean_clinical = Some(data.mean_clinical.clone());
    if neutral && ckpt.model.kind() == ModelKind::Fusion {
        ckpt.neutral_image = Some(cache_neutral_image(&ckpt.model, data)?);
    }
    Ok(ckpt)
}

/// Validation image whose fusion-image-only prediction is closest to uniform.
pub fn cache_neutral_image<T: Scalar>(
    model: &FusionModel<T>,
    data: &PreparedData<T>,
) -> Result<(String, crate::autodiff::Tensor<T>)> {
    let candidates: Vec<(String, &crate::autodiff::Tensor<T>)> = data
        .val
        .iter()
        .filter_map(|s| s.image.as_deref().map(|t| (s.id.clone(), t)))
        .collect();
    let chosen = select_neutral_image(model, &candidates, &data.mean_clinical)?;
    let (_, img) = candidates.into_iter().find(|(id, _)| *id == chosen.id).expect("selected from candidates");
    Ok((chosen.id, img.clone()))
}

#[derive(Debug, Clone)]
pub struct SeedModels<T> {
    pub image_only: Vec<Checkpoint<T>>,
    pub fusion: Vec<Checkpoint<T>>,
    pub feature_only: Checkpoint<T>,
}

/// Trains every model of one run.
pub fn train_seed<T: Scalar>(data: &PreparedData<T>, spec: &ProtocolSpec, seed: u64) -> Result<SeedModels<T>> {
    spec.validate()?;
    let image_size = data.pipeline.size;
    let dim = data.preprocessor.dim();
    let mut image_only = Vec::new();
    let mut fusion = Vec::new();
    for (i, &style) in spec.styles.iter().enumerate() {
        let s = member_seed(seed, i);
        let t = Instant::now();
        let mut cfg = FusionConfig::new(ModelKind::ImageOnly, style, image_size, dim, s);
        cfg.image_feat_dim = spec.image_feat_dim;
        let mut img = FusionModel::new(cfg)?;
        let h = train_single(&mut img, &data.train, &data.val, &spec.train)?;
        log::info!("seed {seed} {} image-only: {} epochs, {:.1}s", style.name(), h.epochs.len(), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let mut cfg = FusionConfig::new(ModelKind::Fusion, style, image_size, dim, s);
        cfg.image_feat_dim = spec.image_feat_dim;
        let mut fus = FusionModel::new(cfg)?;
        fus.load_backbone(&img.export_backbone())?;
        let h1 = train_stage1(&mut fus, &data.train, &data.val, &spec.train)?;
        let h2 = train_stage2(&mut fus, &data.train, &data.val, &spec.train)?;
        log::info!(
            "seed {seed} {} fusion: {}+{} epochs, {:.1}s",
            style.name(),
            h1.epochs.len(),
            h2.epochs.len(),
            t.elapsed().as_secs_f64()
        );
        let mut c = package(img, data, false)?;
        c.history = vec![h];
        image_only.push(c);
        let mut c = package(fus, data, true)?;
        c.history = vec![h1, h2];
        fusion.push(c);
    }
    let mut dnn = FusionModel::new(FusionConfig::new(ModelKind::FeatureOnly, BackboneStyle::Plain, image_size, dim, member_seed(seed, 99)))?;
    let h = train_single(&mut dnn, &data.train, &data.val, &spec.train)?;
    let mut feature_only = package(dnn, data, false)?;
    feature_only.history = vec![h];
    Ok(SeedModels {
        image_only,
        fusion,
        feature_only,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub reports: BTreeMap<String, MetricReport>,
}

impl SeedResult {
    pub fn auc(&self, arm: &str) -> Option<f64> {
        self.reports.get(arm).and_then(|r| r.get("auc"))
    }
}

fn report(preds: &[Prediction]) -> Result<MetricReport> {
    MetricReport::from_predictions(preds)
}

/// Scores all arms of one run on the test split.
pub fn evaluate_seed<T: Scalar>(
    models: &SeedModels<T>,
    data: &PreparedData<T>,
    spec: &ProtocolSpec,
    seed: u64,
) -> Result<SeedResult> {
    let test = &data.test;
    let fusion: Vec<&Checkpoint<T>> = models.fusion.iter().collect();
    let image: Vec<&Checkpoint<T>> = models.image_only.iter().collect();
    let mut reports = BTreeMap::new();
    reports.insert(FUSION_ENSEMBLE.to_string(), report(&predict_samples(&fusion, test, ModalityMode::Full, None)?)?);
    reports.insert(IMAGE_ONLY_ENSEMBLE.to_string(), report(&predict_samples(&image, test, ModalityMode::Full, None)?)?);
    reports.insert(
        FEATURE_ONLY_DNN.to_string(),
        report(&predict_samples(&[&models.feature_only], test, ModalityMode::Full, None)?)?,
    );
    reports.insert(
        FUSION_IMAGE_ONLY.to_string(),
        report(&predict_samples(&fusion, test, ModalityMode::FusionImageOnly, None)?)?,
    );
    reports.insert(
        FUSION_FEATURE_ONLY.to_string(),
        report(&predict_samples(&fusion, test, ModalityMode::FusionFeatureOnly, None)?)?,
    );
    for (i, c) in models.fusion.iter().enumerate() {
        let name = format!("fusion_{}", c.model.config.backbone.style.name());
        reports.insert(name, report(&predict_samples(&fusion[i..=i], test, ModalityMode::Full, None)?)?);
        let name = format!("image_only_{}", models.image_only[i].model.config.backbone.style.name());
        reports.insert(name, report(&predict_samples(&image[i..=i], test, ModalityMode::Full, None)?)?);
    }
    for &f in &spec.fractions {
        let mode = ModalityMode::partial(f, seed)?;
        reports.insert(partial_arm(f), report(&predict_samples(&fusion, test, mode, None)?)?);
    }
    if spec.run_baselines {
        let rows = |set: &[crate::fusion::Sample<T>]| -> Vec<(String, Vec<f64>, usize)> {
            set.iter().map(|s| (s.id.clone(), s.clinical.iter().map(|x| x.as_f64()).collect(), s.label)).collect()
        };
        let train = rows(&data.train);
        let x: Vec<Vec<f64>> = train.iter().map(|r| r.1.clone()).collect();
        let y: Vec<usize> = train.iter().map(|r| r.2).collect();
        let test_rows = rows(test);
        let cfg = BaselineConfig {
            seed,
            ..spec.baselines.clone()
        };
        for kind in BaselineKind::ALL {
            let m = fit_baseline(kind, &x, &y, 3, &cfg)?;
            reports.insert(kind.name().to_string(), report(&predict_rows(m.as_ref(), &test_rows))?);
        }
    }
    Ok(SeedResult { seed, reports })
}

/// Synthesizes the run's dataset under `work_dir/data_<seed>` and prepares it.
pub fn prepare_seed_data<T: Scalar>(synth: &SynthConfig, work_dir: &Path, seed: u64, drop_threshold: f64) -> Result<PreparedData<T>> {
    let cfg = SynthConfig {
        seed: synth.seed.wrapping_add(seed),
        ..synth.clone()
    };
    let dir = work_dir.join(format!("data_{seed}"));
    let g = generate(&cfg, &dir)?;
    g.dataset.prepare(&ImagePipeline::with_size(cfg.image_size)?, drop_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub synth: SynthConfig,
    pub spec: ProtocolSpec,
    pub seeds: Vec<SeedResult>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ProtocolReport {
    /// Median test macro-AUC of an arm across runs.
    pub fn median_auc(&self, arm: &str) -> Option<f64> {
        let v: Vec<f64> = self.seeds.iter().filter_map(|s| s.auc(arm)).collect();
        (v.len() == self.seeds.len() && !v.is_empty()).then(|| median(v))
    }

    pub fn arms(&self) -> Vec<String> {
        self.seeds.first().map(|s| s.reports.keys().cloned().collect()).unwrap_or_default()
    }

    /// `(fraction, median AUC)` rows and the Spearman correlation between them.
    pub fn fraction_trend(&self) -> Result<(Vec<(f64, f64)>, f64)> {
        let rows: Vec<(f64, f64)> = self
            .spec
            .fractions
            .iter()
            .map(|&f| {
                self.median_auc(&partial_arm(f))
                    .map(|a| (f, a))
                    .ok_or_else(|| Error::Missing(format!("no AUC for fraction {f}")))
            })
            .collect::<Result<_>>()?;
        let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
        let rho = spearman(&x, &y)?;
        Ok((rows, rho))
    }

    /// Aligned text table: one row per arm, one column per seed plus the median.
    pub fn table(&self) -> String {
        self.table_where(|_| true)
    }

    /// [`Self::table`] restricted to arms accepted by `keep`.
    pub fn table_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut out = format!("{:<26}", "arm (test macro-AUC)");
        for s in &self.seeds {
            out.push_str(&format!(" {:>8}", format!("seed {}", s.seed)));
        }
        out.push_str(&format!(" {:>8}\n", "median"));
        for arm in self.arms().into_iter().filter(|a| keep(a)) {
            out.push_str(&format!("{arm:<26}"));
            for s in &self.seeds {
                out.push_str(&format!(" {:>8.3}", s.auc(&arm).unwrap_or(f64::NAN)));
            }
            out.push_str(&format!(" {:>8.3}\n", self.median_auc(&arm).unwrap_or(f64::NAN)));
        }
        out
    }
}

/// Runs the full protocol for each seed in turn.
pub fn run_protocol<T: Scalar>(
    synth: &SynthConfig,
    spec: &ProtocolSpec,
    seeds: &[u64],
    work_dir: &Path,
    mut on_models: impl FnMut(u64, &SeedModels<T>, &PreparedData<T>) -> Result<()>,
) -> Result<ProtocolReport> {
    spec.validate()?;
    synth.validate()?;
    let mut results = Vec::new();
    for &seed in seeds {
        let t = Instant::now();
        let data = prepare_seed_data::<T>(synth, work_dir, seed, spec.drop_threshold)?;
        let models = train_seed(&data, spec, seed)?;
        on_models(seed, &models, &data)?;
        let r = evaluate_seed(&models, &data, spec, seed)?;
        log::info!(
            "seed {seed}: fusion {:.3} image {:.3} dnn {:.3} ({:.0}s)",
            r.auc(FUSION_ENSEMBLE).unwrap_or(f64::NAN),
            r.auc(IMAGE_ONLY_ENSEMBLE).unwrap_or(f64::NAN),
            r.auc(FEATURE_ONLY_DNN).unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64()
        );
        results.push(r);
    }
    Ok(ProtocolReport {
        synth: synth.clone(),
        spec: spec.clone(),
        seeds: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            n_subjects: 60,
            image_size: 16,
            raw_size: 24,
            ..SynthConfig::default()
        }
    }

    fn tiny_spec() -> ProtocolSpec {
        ProtocolSpec {
            styles: vec![BackboneStyle::Plain],
            train: TrainSpec {
                max_epochs: 2,
                patience: 1,
                ..desk_train_spec()
            },
            fractions: vec![0.0, 0.5, 1.0],
            baselines: BaselineConfig {
                rf_trees: 5,
                ..BaselineConfig::default()
            },
            ..ProtocolSpec::desk()
        }
    }

    #[test]
    fn protocol_runs_end_to_end_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let run = || run_protocol::<f32>(&tiny_synth(), &tiny_spec(), &[1], dir.path(), |_, _, _| Ok(())).unwrap();
        let a = run();
        assert_eq!(a, run());
        let arms = a.arms();
        for arm in [FUSION_ENSEMBLE, IMAGE_ONLY_ENSEMBLE, FEATURE_ONLY_DNN, FUSION_IMAGE_ONLY, FUSION_FEATURE_ONLY, "qda"] {
            assert!(arms.iter().any(|x| x == arm), "{arm} missing from {arms:?}");
        }
        // Full clinical availability is the full mode; none is the image-only mode.
        let s = &a.seeds[0];
        assert_eq!(s.reports[&partial_arm(1.0)], s.reports[FUSION_ENSEMBLE]);
        assert_eq!(s.reports[&partial_arm(0.0)], s.reports[FUSION_IMAGE_ONLY]);
        assert!(a.table().lines().count() == arms.len() + 1);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
