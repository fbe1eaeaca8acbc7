use fuselearn::clinical::DEFAULT_DROP_THRESHOLD;
use fuselearn::experiment::{desk_train_spec, package};
use fuselearn::fusion::{
    train_single, train_stage1, train_stage2, BackboneStyle, Checkpoint, FusionConfig, FusionModel, ImageFeatDim,
    ModelKind, TrainSpec,
};
use fuselearn::image::ImagePipeline;
use fuselearn::synth::{generate, ingest_external, SignalMode, Split, SynthConfig};
use fuselearn::Scalar;
use serde_json::json;

use super::{parse, parse_dtype, with_dtype, Context};
use crate::config::write_snapshot;
use crate::error::CliError;
use crate::{SynthArgs, TrainArgs};

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<(), CliError> {
    let mut cfg: SynthConfig = ctx.file.synth.clone().unwrap_or_default();
    if let Some(seed) = a.seed.or(ctx.file.seed) {
        cfg.seed = seed;
    }
    if let Some(n) = a.n {
        cfg.n_subjects = n;
    }
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    if let Some(m) = &a.signal_mode {
        cfg.signal_mode = parse::<SignalMode>(m)?;
    }
    if let Some(p) = &a.priors {
        let [lo, mid, hi] = p[..] else {
            return Err(CliError::Config(format!("--priors needs 3 values, got {}", p.len())));
        };
        cfg.priors = [lo, mid, hi];
    }
    cfg.validate()?;
    let g = generate(&cfg, &ctx.out)?;
    let count = |s: Split| g.dataset.split(s).count();
    println!(
        "wrote {} subjects to {} (train {}, val {}, test {})",
        g.dataset.subjects.len(),
        ctx.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    write_snapshot(&ctx.out, "synth", json!({ "synth": cfg }))
}

/// Training hyperparameters: preset, then config file, then flags.
fn resolve_train_spec(ctx: &Context, a: &TrainArgs) -> Result<TrainSpec, CliError> {
    let mut spec = match a.preset.as_str() {
        "reference" => TrainSpec::default(),
        "desk" => desk_train_spec(),
        other => return Err(CliError::Config(format!("unknown preset `{other}` (reference|desk)"))),
    };
    if let Some(t) = &ctx.file.train {
        spec = t.clone();
    }
    if let Some(v) = a.max_epochs {
        spec.max_epochs = v;
    }
    if let Some(v) = a.lr {
        spec.lr = v;
    }
    if let Some(v) = a.patience {
        spec.patience = v;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<(), CliError> {
    let dtype = parse_dtype(a.precision.as_deref().or(ctx.file.model.precision.as_deref()))?;
    with_dtype!(dtype, T => train_impl::<T>(ctx, &a))
}

fn train_impl<T: Scalar>(ctx: &Context, a: &TrainArgs) -> Result<(), CliError> {
    let seed = a.seed.or(ctx.file.seed).unwrap_or(0);
    let spec = resolve_train_spec(ctx, a)?;
    let m = &ctx.file.model;
    let style: BackboneStyle = parse(a.backbone.as_deref().or(m.backbone.as_deref()).unwrap_or("plain"))?;
    let feat_dim: ImageFeatDim = parse(a.img_feat_dim.as_deref().or(m.img_feat_dim.as_deref()).unwrap_or("64"))?;
    let size = a.image_size.or(m.image_size).unwrap_or(64);
    let kind = if a.image_only {
        ModelKind::ImageOnly
    } else if a.feature_only {
        ModelKind::FeatureOnly
    } else {
        ModelKind::Fusion
    };

    let dataset = ingest_external(&a.data, a.include_intubation.unwrap_or(true))?;
    for e in &dataset.excluded {
        log::warn!("excluded {}: {}", e.subject_id, e.reason);
    }
    let data = dataset.prepare::<T>(&ImagePipeline::with_size(size)?, DEFAULT_DROP_THRESHOLD)?;
    let mut config = FusionConfig::new(kind, style, size, data.preprocessor.dim(), seed);
    config.image_feat_dim = feat_dim;
    let mut model = FusionModel::<T>::new(config.clone())?;

    let history = if kind == ModelKind::Fusion {
        match &a.init_backbone {
            Some(path) => {
                let init = Checkpoint::<T>::load(path)?;
                if init.model.config.backbone != model.config.backbone {
                    return Err(CliError::Mismatch(format!(
                        "{} has a {} backbone, training a {} model",
                        path.display(),
                        init.model.config.backbone.style.name(),
                        style.name()
                    )));
                }
                model.load_backbone(&init.model.export_backbone())?;
            }
            None => log::warn!("no --init-backbone given; stage 1 trains on a randomly initialized frozen backbone"),
        }
        let h1 = train_stage1(&mut model, &data.train, &data.val, &spec)?;
        let h2 = train_stage2(&mut model, &data.train, &data.val, &spec)?;
        vec![h1, h2]
    } else {
        vec![train_single(&mut model, &data.train, &data.val, &spec)?]
    };

    let mut ckpt = package(model, &data, false)?;
    ckpt.history = history;
    let path = ctx.out_path("model.dcfz");
    ckpt.save(&path)?;
    let jsonl: String = ckpt.history.iter().map(|h| h.to_jsonl()).collect();
    let hist_path = ctx.out_path("history.jsonl");
    std::fs::write(&hist_path, jsonl).map_err(|e| CliError::io(&hist_path, e))?;
    let best = ckpt.history.last().map(|h| h.best_val_loss).unwrap_or(f64::NAN);
    println!(
        "{} model ({}, latent {}) saved to {}; best val loss {best:.6}",
        match kind {
            ModelKind::Fusion => "fusion",
            ModelKind::ImageOnly => "image-only",
            ModelKind::FeatureOnly => "feature-only",
        },
        style.name(),
        config.latent_label(),
        path.display()
    );
    write_snapshot(
        &ctx.out,
        "train",
        json!({
            "data": a.data,
            "seed": seed,
            "precision": T::DTYPE,
            "model": config,
            "train": spec,
            "init_backbone": a.init_backbone,
            "include_intubation": a.include_intubation.unwrap_or(true),
        }),
    )
}
