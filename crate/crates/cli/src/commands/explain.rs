use fuselearn::autodiff::OpKind;
use fuselearn::fusion::{read_checkpoint_meta, Checkpoint, ImageInput, ModelKind};
use fuselearn::gradcam::{gradcam as grad_cam, overlay, GRADCAM_LAYER};
use fuselearn::image::{crop_to_mask_bbox, resize_bilinear};
use fuselearn::inference::CLASS_NAMES;
use fuselearn::verify::gradcheck_suite;
use fuselearn::Scalar;
use serde::Serialize;
use serde_json::json;

use super::{with_dtype, write_json, Context};
use crate::config::write_snapshot;
use crate::error::CliError;
use crate::{GradcamArgs, GradcheckArgs};

#[derive(Serialize)]
struct GradcamEntry {
    subject_id: String,
    target_class: String,
    predicted: String,
    probabilities: Vec<f64>,
    file: String,
}

pub fn gradcam(ctx: &Context, a: GradcamArgs) -> Result<(), CliError> {
    let dtype = read_checkpoint_meta(&a.ckpt)?.dtype;
    with_dtype!(dtype, T => gradcam_impl::<T>(ctx, &a))
}

fn gradcam_impl<T: Scalar>(ctx: &Context, a: &GradcamArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::<T>::load(&a.ckpt)?;
    let model = &ckpt.model;
    if model.kind() == ModelKind::FeatureOnly {
        return Err(CliError::Config("feature-only models have no image branch".into()));
    }
    let target: Option<usize> = match a.class.as_str() {
        "predicted" => None,
        c => Some(
            CLASS_NAMES
                .iter()
                .position(|&n| n == c)
                .ok_or_else(|| CliError::Config(format!("unknown class `{c}` (low|intermediate|high|predicted)")))?,
        ),
    };
    let (Some(pipeline), Some(preprocessor)) = (&ckpt.image_pipeline, &ckpt.preprocessor) else {
        return Err(CliError::Prereq(format!("{} lacks its fitted preprocessing", a.ckpt.display())));
    };
    let image_only_mode = match a.mode.as_str() {
        "image-only" => true,
        "full" => false,
        m => return Err(CliError::Config(format!("unknown gradcam mode `{m}` (full|image-only)"))),
    };
    let mean: Option<Vec<T>> = ckpt.mean_clinical.as_ref().map(|m| m.iter().map(|&v| T::of(v)).collect());
    let dataset = fuselearn::synth::ingest_external(&a.data, true)?;

    let mut entries = Vec::new();
    for id in &a.subjects {
        let Some(subject) = dataset.subject(id) else {
            log::warn!("subject {id} not in dataset; skipped");
            continue;
        };
        let (raw, mask) = dataset.load_image(subject)?;
        let img = pipeline.run::<T>(&raw, &mask)?.tensor;
        let clinical: Option<Vec<T>> = match model.kind() {
            ModelKind::ImageOnly => None,
            _ if image_only_mode => Some(mean.clone().ok_or_else(|| {
                CliError::Prereq(format!("{} lacks the training-mean clinical vector", a.ckpt.display()))
            })?),
            _ => Some(preprocessor.transform(&subject.record)),
        };
        let probs = model.predict_proba(Some(ImageInput::Pixels(&img)), clinical.as_deref())?;
        let probs: Vec<f64> = probs.iter().map(|p| p.as_f64()).collect();
        let predicted = (0..probs.len()).max_by(|&i, &j| probs[i].total_cmp(&probs[j])).unwrap_or(0);
        let class = target.unwrap_or(predicted);
        let mut heat = grad_cam(model, &img, clinical.as_deref(), class)?;
        heat.subject_id = Some(id.clone());
        let (cropped, _) = crop_to_mask_bbox(&raw, &mask, pipeline.margin_frac)?;
        let base = resize_bilinear(&cropped, pipeline.size)?;
        let file = format!("gradcam_{id}.png");
        overlay(&base, &heat, &ctx.out_path(&file))?;
        if heat.is_zero() {
            log::warn!("{id}: all-zero map for class {}", CLASS_NAMES[class]);
        }
        println!("{id}: class {} (predicted {}) -> {file}", CLASS_NAMES[class], CLASS_NAMES[predicted]);
        entries.push(GradcamEntry {
            subject_id: id.clone(),
            target_class: CLASS_NAMES[class].to_string(),
            predicted: CLASS_NAMES[predicted].to_string(),
            probabilities: probs,
            file,
        });
    }
    if entries.is_empty() {
        return Err(CliError::Prereq("none of the requested subjects are in the dataset".into()));
    }
    write_json(
        &ctx.out_path("gradcam_manifest.json"),
        &json!({ "layer": GRADCAM_LAYER, "mode": a.mode, "entries": entries }),
    )?;
    write_snapshot(
        &ctx.out,
        "gradcam",
        json!({ "data": a.data, "ckpt": a.ckpt, "subjects": a.subjects, "mode": a.mode, "class": a.class }),
    )
}

pub fn gradcheck(ctx: &Context, a: GradcheckArgs) -> Result<(), CliError> {
    let fault = a
        .fault
        .as_deref()
        .map(|f| f.parse::<OpKind>().map_err(CliError::Config))
        .transpose()?;
    let report = gradcheck_suite(a.seeds, fault)?;
    println!("{:<22} {:>6} {:>14} {:>6}", "op", "seeds", "max rel err", "pass");
    for c in &report.checks {
        println!("{:<22} {:>6} {:>14.3e} {:>6}", c.op, c.seeds, c.max_rel_error, if c.passed { "ok" } else { "FAIL" });
    }
    write_json(&ctx.out_path("gradcheck.json"), &report)?;
    write_snapshot(&ctx.out, "gradcheck", json!({ "seeds": a.seeds, "fault": a.fault }))?;
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.op.as_str()).collect();
        Err(CliError::Failed(format!(
            "gradient check failed for {} (tolerance {:e})",
            failed.join(", "),
            report.tolerance
        )))
    }
}
