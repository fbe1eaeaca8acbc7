use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fuselearn::experiment::cache_neutral_image;
use fuselearn::fusion::{read_checkpoint_meta, Checkpoint, ModelKind};
use fuselearn::inference::{predict_samples, read_predictions, write_predictions, ModalityMode, Prediction};
use fuselearn::stats::{compare_predictions, MetricReport};
use fuselearn::synth::{ingest_external, PreparedData, Split};
use fuselearn::{Error, Scalar};
use serde::Serialize;
use serde_json::json;

use super::{parse, read_json, with_dtype, write_json, Context};
use crate::config::write_snapshot;
use crate::error::CliError;
use crate::{CompareArgs, EvalArgs};

pub const SWEEP_FRACTIONS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!("unknown split `{other}` (train|val|test)"))),
    }
}

fn print_report(label: &str, r: &MetricReport) {
    let cells: Vec<String> = fuselearn::stats::Metrics::NAMES.iter().map(|&k| format!("{k} {}", r.cell(k))).collect();
    println!("{label:<16} {}", cells.join("  "));
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<(), CliError> {
    if !a.aggregate.is_empty() {
        let runs = a.aggregate.iter().map(|p| read_json::<MetricReport>(p)).collect::<Result<Vec<_>, _>>()?;
        let agg = MetricReport::aggregate(&runs)?;
        write_json(&ctx.out_path("metrics.json"), &agg)?;
        print_report("aggregate", &agg);
        return write_snapshot(&ctx.out, "eval", json!({ "aggregate": a.aggregate }));
    }
    let ckpts: Vec<PathBuf> = a.ckpt.iter().chain(&a.ensemble).cloned().collect();
    if ckpts.is_empty() {
        return Err(CliError::Config("eval needs --ckpt, --ensemble or --aggregate".into()));
    }
    let dtype = read_checkpoint_meta(&ckpts[0])?.dtype;
    for p in &ckpts[1..] {
        if read_checkpoint_meta(p)?.dtype != dtype {
            return Err(CliError::Mismatch("ensemble members use different precisions".into()));
        }
    }
    with_dtype!(dtype, T => eval_impl::<T>(ctx, &a, &ckpts))
}

#[derive(Serialize)]
struct SweepRow {
    fraction: f64,
    report: MetricReport,
}

fn eval_impl<T: Scalar>(ctx: &Context, a: &EvalArgs, paths: &[PathBuf]) -> Result<(), CliError> {
    let data_path = a.data.as_ref().ok_or_else(|| CliError::Config("--data is required".into()))?;
    let split = parse_split(&a.split)?;
    let mut ckpts = paths.iter().map(|p| Checkpoint::<T>::load(p)).collect::<Result<Vec<_>, _>>()?;
    let first = &ckpts[0];
    let (Some(pipeline), Some(preprocessor)) = (first.image_pipeline.clone(), first.preprocessor.clone()) else {
        return Err(CliError::Prereq(format!("{} lacks its fitted preprocessing", paths[0].display())));
    };
    if ckpts.iter().any(|c| c.image_pipeline.as_ref() != Some(&pipeline) || c.preprocessor.as_ref() != Some(&preprocessor)) {
        return Err(CliError::Mismatch("ensemble members were trained with different preprocessing".into()));
    }
    let dataset = ingest_external(data_path, true)?;

    if a.cache_neutral_image {
        let data = PreparedData {
            train: Vec::new(),
            val: dataset.samples::<T>(Split::Val, &pipeline, &preprocessor)?,
            test: Vec::new(),
            mean_clinical: first.mean_clinical.clone().ok_or_else(|| {
                CliError::Prereq(format!("{} lacks the training-mean clinical vector", paths[0].display()))
            })?,
            preprocessor: preprocessor.clone(),
            pipeline: pipeline.clone(),
        };
        for (c, p) in ckpts.iter_mut().zip(paths) {
            if c.model.kind() == ModelKind::Fusion {
                let (id, img) = cache_neutral_image(&c.model, &data)?;
                println!("{}: neutral image {id}", p.display());
                c.neutral_image = Some((id, img));
                c.save(p)?;
            }
        }
    }

    let samples = dataset.samples::<T>(split, &pipeline, &preprocessor)?;
    if a.runs == 0 || ckpts.len() % a.runs != 0 {
        return Err(CliError::Config(format!("{} checkpoints cannot form {} equal runs", ckpts.len(), a.runs)));
    }
    let per_run = ckpts.len() / a.runs;
    let mut mode: ModalityMode = parse(&a.mode)?;
    if let (ModalityMode::PartialClinical { fraction, .. }, Some(seed)) = (mode, a.seed) {
        mode = ModalityMode::partial(fraction, seed)?;
    }
    let evaluate = |mode: ModalityMode, write: bool| -> Result<MetricReport, CliError> {
        let mut reports = Vec::new();
        for (r, group) in ckpts.chunks(per_run).enumerate() {
            let run_mode = match mode {
                ModalityMode::PartialClinical { fraction, seed } => ModalityMode::partial(fraction, seed + r as u64)?,
                m => m,
            };
            let refs: Vec<&Checkpoint<T>> = group.iter().collect();
            let preds = predict_samples(&refs, &samples, run_mode, a.weights.as_deref())?;
            if write {
                let name = if a.runs == 1 { "predictions.csv".to_string() } else { format!("predictions_run{r}.csv") };
                save_predictions(&ctx.out_path(&name), &preds)?;
            }
            reports.push(MetricReport::from_predictions(&preds)?);
        }
        Ok(MetricReport::aggregate(&reports)?)
    };

    if a.sweep {
        let seed = a.seed.unwrap_or(0);
        let mut rows = Vec::new();
        println!("{:<10} {}", "fraction", "metrics");
        for f in SWEEP_FRACTIONS {
            let report = evaluate(ModalityMode::partial(f, seed)?, false)?;
            print_report(&format!("{:.0}%", f * 100.0), &report);
            rows.push(SweepRow { fraction: f, report });
        }
        write_json(&ctx.out_path("sweep.json"), &rows)?;
    } else {
        let report = evaluate(mode, true)?;
        write_json(&ctx.out_path("metrics.json"), &report)?;
        print_report(&mode.label(), &report);
    }
    write_snapshot(
        &ctx.out,
        "eval",
        json!({
            "data": data_path,
            "checkpoints": paths,
            "mode": mode,
            "split": a.split,
            "runs": a.runs,
            "weights": a.weights,
            "sweep": a.sweep,
        }),
    )
}

fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_predictions(&mut buf, preds)?;
    std::fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

fn load_predictions(path: &Path) -> Result<Vec<Prediction>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_predictions(f)?)
}

pub fn compare(ctx: &Context, a: CompareArgs) -> Result<(), CliError> {
    let mut pa = load_predictions(&a.a)?;
    let mut pb = load_predictions(&a.b)?;
    let ids = |p: &[Prediction]| p.iter().map(|x| x.subject_id.clone()).collect::<BTreeSet<_>>();
    let (ia, ib) = (ids(&pa), ids(&pb));
    if ia != ib || ia.len() != pa.len() || ib.len() != pb.len() {
        let diff: Vec<String> = ia.symmetric_difference(&ib).take(20).cloned().collect();
        return Err(CliError::Mismatch(format!(
            "prediction files cover different subjects ({} vs {}); symmetric difference: {}",
            pa.len(),
            pb.len(),
            if diff.is_empty() { "duplicate ids".to_string() } else { diff.join(", ") }
        )));
    }
    pa.sort_by(|x, y| x.subject_id.cmp(&y.subject_id));
    pb.sort_by(|x, y| x.subject_id.cmp(&y.subject_id));
    let report = compare_predictions(&pa, &pb).map_err(|e| match e {
        Error::InvalidArgument(m) => CliError::Mismatch(m),
        other => other.into(),
    })?;
    write_json(&ctx.out_path("comparison.json"), &report)?;
    let m = &report.mcnemar;
    println!("{:<22} {:>10} {:>10} {:>10} {:>8}", "test", "a", "b", "p", "signif");
    println!("{:<22} {:>10.4} {:>10.4} {:>10.4} {:>8}", format!("mcnemar ({})", m.metric), m.value_a, m.value_b, m.p, m.significant);
    for d in &report.delong.per_class {
        println!(
            "{:<22} {:>10.4} {:>10.4} {:>10.4} {:>8}",
            format!("delong {}", d.metric),
            d.value_a,
            d.value_b,
            d.p,
            d.significant
        );
    }
    write_snapshot(&ctx.out, "compare", json!({ "a": a.a, "b": a.b }))
}
