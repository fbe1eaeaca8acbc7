use fuselearn::experiment::{
    run_protocol, ProtocolReport, ProtocolSpec, FEATURE_ONLY_DNN, FUSION_ENSEMBLE, FUSION_FEATURE_ONLY,
    FUSION_IMAGE_ONLY, IMAGE_ONLY_ENSEMBLE,
};
use fuselearn::fusion::ImageFeatDim;
use fuselearn::synth::{SignalMode, SynthConfig};
use fuselearn::Scalar;
use serde_json::json;

use super::{parse, parse_dtype, with_dtype, write_json, Context};
use crate::config::write_snapshot;
use crate::error::CliError;
use crate::ExperimentArgs;

const PRESETS: [&str; 6] = ["ensemble", "feat-dim", "image-only", "feature-only", "sweep", "all"];
const BASELINE_ARMS: [&str; 3] = ["qda", "ridge", "random_forest"];

fn keep_arm(preset: &str, arm: &str) -> bool {
    match preset {
        "ensemble" => arm.starts_with("fusion_") && !arm.ends_with("_only") || arm.starts_with("image_only_"),
        "image-only" => arm.starts_with("image_only_") || arm == FUSION_IMAGE_ONLY || arm == FUSION_ENSEMBLE,
        "feature-only" => [FEATURE_ONLY_DNN, FUSION_FEATURE_ONLY, FUSION_ENSEMBLE].contains(&arm) || BASELINE_ARMS.contains(&arm),
        "sweep" => arm.starts_with("partial_"),
        _ => true,
    }
}

pub fn experiment(ctx: &Context, a: ExperimentArgs) -> Result<(), CliError> {
    if !PRESETS.contains(&a.preset.as_str()) {
        return Err(CliError::Config(format!("unknown preset `{}` ({})", a.preset, PRESETS.join("|"))));
    }
    if a.seeds.is_empty() {
        return Err(CliError::Config("--seeds needs at least one value".into()));
    }
    let dtype = parse_dtype(a.precision.as_deref().or(ctx.file.model.precision.as_deref()))?;
    with_dtype!(dtype, T => experiment_impl::<T>(ctx, &a))
}

fn experiment_impl<T: Scalar>(ctx: &Context, a: &ExperimentArgs) -> Result<(), CliError> {
    let mut synth: SynthConfig = ctx.file.synth.clone().unwrap_or_default();
    if let Some(seed) = ctx.file.seed {
        synth.seed = seed;
    }
    if let Some(n) = a.n {
        synth.n_subjects = n;
    }
    if let Some(s) = a.image_size {
        synth.image_size = s;
        synth.raw_size = synth.raw_size.max(s + s / 4);
    }
    if let Some(m) = &a.signal_mode {
        synth.signal_mode = parse::<SignalMode>(m)?;
    }
    let mut spec: ProtocolSpec = ctx.file.protocol.clone().unwrap_or_default();
    if let Some(e) = a.max_epochs {
        spec.train.max_epochs = e;
    }
    spec.run_baselines = matches!(a.preset.as_str(), "feature-only" | "all");
    let work = ctx.out_path("work");

    let runs: Vec<(String, ProtocolSpec)> = if a.preset == "feat-dim" {
        [ImageFeatDim::Projected(64), ImageFeatDim::Projected(128), ImageFeatDim::Native]
            .into_iter()
            .map(|d| {
                let s = ProtocolSpec {
                    image_feat_dim: d,
                    ..spec.clone()
                };
                let label = match d {
                    ImageFeatDim::Projected(w) => w.to_string(),
                    ImageFeatDim::Native => "native".to_string(),
                };
                (label, s)
            })
            .collect()
    } else {
        vec![(a.preset.clone(), spec.clone())]
    };

    let mut reports: Vec<(String, ProtocolReport)> = Vec::new();
    for (label, s) in runs {
        log::info!("running {label} over seeds {:?}", a.seeds);
        let r = run_protocol::<T>(&synth, &s, &a.seeds, &work.join(&label), |_, _, _| Ok(()))?;
        reports.push((label, r));
    }

    let mut summary = serde_json::Map::new();
    if a.preset == "feat-dim" {
        println!("{:<10} {:>10} {:>10} {:>10}", "feat dim", FUSION_ENSEMBLE, "image only", "feat only");
        for (label, r) in &reports {
            let m = |arm| r.median_auc(arm).unwrap_or(f64::NAN);
            println!("{label:<10} {:>10.3} {:>10.3} {:>10.3}", m(FUSION_ENSEMBLE), m(FUSION_IMAGE_ONLY), m(FUSION_FEATURE_ONLY));
            summary.insert(label.clone(), json!(m(FUSION_ENSEMBLE)));
        }
    } else {
        let (_, r) = &reports[0];
        print!("{}", r.table_where(|arm| keep_arm(&a.preset, arm)));
        for arm in [FUSION_ENSEMBLE, IMAGE_ONLY_ENSEMBLE, FEATURE_ONLY_DNN, FUSION_IMAGE_ONLY, FUSION_FEATURE_ONLY] {
            if let Some(v) = r.median_auc(arm) {
                summary.insert(arm.to_string(), json!(v));
            }
        }
        if matches!(a.preset.as_str(), "sweep" | "all") {
            let (rows, rho) = r.fraction_trend()?;
            println!("spearman(fraction, median AUC) = {rho:.3}");
            summary.insert("fraction_trend".into(), json!({ "rows": rows, "spearman": rho }));
        }
    }

    let full: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|(l, r)| (l.clone(), serde_json::to_value(r).expect("plain data")))
        .collect();
    write_json(&ctx.out_path("experiment.json"), &json!({ "preset": a.preset, "median": summary, "runs": full }))?;
    let tables: String = reports.iter().map(|(l, r)| format!("# {l}\n{}\n", r.table())).collect();
    let table_path = ctx.out_path("experiment_table.txt");
    std::fs::write(&table_path, tables).map_err(|e| CliError::io(&table_path, e))?;
    write_snapshot(
        &ctx.out,
        "experiment",
        json!({ "preset": a.preset, "seeds": a.seeds, "precision": T::DTYPE, "synth": synth, "protocol": spec }),
    )
}
