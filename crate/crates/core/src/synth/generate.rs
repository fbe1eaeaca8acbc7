use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{
    ingest_external, write_outcomes, write_split, Dataset, ManifestEntry, Split, CLINICAL_FILE, MANIFEST_FILE, OUTCOMES_FILE,
    SCHEMA_FILE, SPLIT_FILE,
};
use super::{derive_risk_label, OutcomeRecord, SignalMode, SynthConfig, HIGH, INTERMEDIATE, LOW};
use crate::clinical::{write_clinical_csv, ClinicalRecord, FeatureKind, FeatureSpec, RawValue, TypedFeatureSchema};
use crate::error::{Error, Result};
use crate::image::{save_gray, LungMask, RawImage};

/// Stream ids separating the independent random draws derived from the master seed.
const STREAM_FEATURES: u64 = 1 << 40;
const STREAM_SPLIT: u64 = (1 << 40) + 1;
const STREAM_MISSING: u64 = (1 << 40) + 2;

/// Feature declarations: binary, then categorical, then continuous.
pub fn synth_schema(cfg: &SynthConfig) -> TypedFeatureSchema {
    let mut features = Vec::new();
    for i in 0..cfg.clinical.binary {
        features.push(FeatureSpec {
            name: format!("bin_{i:02}"),
            kind: FeatureKind::Binary,
        });
    }
    for i in 0..cfg.clinical.categorical {
        let levels = 3 + i % 3;
        features.push(FeatureSpec {
            name: format!("cat_{i:02}"),
            kind: FeatureKind::Categorical {
                vocab: (0..levels).map(|k| format!("c{k}")).collect(),
            },
        });
    }
    for i in 0..cfg.clinical.continuous {
        features.push(FeatureSpec {
            name: format!("cont_{i:02}"),
            kind: FeatureKind::Continuous,
        });
    }
    TypedFeatureSchema::new(features).expect("generated names are unique")
}

/// Cycles through 0..30% and gives the last feature 50% (so the 40% drop rule triggers).
pub fn default_missing_rates(num_features: usize) -> Vec<f64> {
    let cycle = [0.0, 0.05, 0.1, 0.2, 0.3];
    (0..num_features)
        .map(|j| if j + 1 == num_features && num_features > 1 { 0.5 } else { cycle[j % cycle.len()] })
        .collect()
}

/// Fixed per-feature generative parameters.
struct FeatureModel {
    informative: bool,
    direction: f64,
    base: f64,
    mean: f64,
    sd: f64,
}

/// Exactly `round(rate * n)` randomly chosen subjects miss each feature; `[subject][feature]`.
fn missing_masks(rates: &[f64], n: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = stream(seed, STREAM_MISSING);
    let mut masks = vec![vec![false; rates.len()]; n];
    for (j, rate) in rates.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in order.iter().take((rate * n as f64).round() as usize) {
            masks[i][j] = true;
        }
    }
    masks
}

fn feature_models(cfg: &SynthConfig, rates: &[f64]) -> Vec<FeatureModel> {
    let mut rng = stream(cfg.seed, STREAM_FEATURES);
    let n = rates.len();
    let k = (cfg.clinical.informative_fraction * n as f64).round() as usize;
    // The heavily missing last feature stays uninformative.
    let candidates: Vec<usize> = (0..n).filter(|&j| rates[j] <= 0.4).collect();
    let mut order = candidates.clone();
    order.shuffle(&mut rng);
    let informative: Vec<usize> = order.into_iter().take(k).collect();
    (0..n)
        .map(|j| FeatureModel {
            informative: informative.contains(&j),
            direction: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            base: rng.gen_range(-1.0..1.0),
            mean: rng.gen_range(20.0..120.0),
            sd: rng.gen_range(2.0..15.0),
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Class shift applied to informative clinical features.
fn clinical_shift(mode: SignalMode, label: usize) -> f64 {
    match mode {
        SignalMode::ImageDominant => 0.0,
        SignalMode::Complementary => {
            if label == HIGH {
                1.0
            } else {
                0.0
            }
        }
        SignalMode::ClinicalDominant => [-1.0, 0.0, 1.0][label] * 1.5,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn clinical_values(
    schema: &TypedFeatureSchema,
    models: &[FeatureModel],
    shift: f64,
    effect: f64,
    missing: &[bool],
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, RawValue> {
    let mut values = BTreeMap::new();
    for ((spec, m), &missing) in schema.features().iter().zip(models).zip(missing) {
        let s = if m.informative { m.direction * shift * effect } else { 0.0 };
        let v = match &spec.kind {
            FeatureKind::Binary => RawValue::Binary(rng.gen_bool(sigmoid(m.base + 1.6 * s))),
            FeatureKind::Categorical { vocab } => {
                let weights: Vec<f64> = (0..vocab.len())
                    .map(|c| {
                        let lift = if c == 0 { 1.4 * s } else { 0.0 };
                        (m.base * (c as f64 - 1.0) * 0.5 + lift).exp()
                    })
                    .collect();
                let c = WeightedIndex::new(&weights).expect("positive weights").sample(rng);
                RawValue::Category(vocab[c].clone())
            }
            FeatureKind::Continuous => {
                let z: f64 = rng.sample(StandardNormal);
                RawValue::Number(((m.mean + m.sd * (z + s)) * 100.0).round() / 100.0)
            }
        };
        values.insert(spec.name.clone(), if missing { RawValue::Missing } else { v });
    }
    values
}

/// Two elliptical lung fields.
fn lung_mask(size: usize) -> LungMask {
    let s = size as f64;
    let inside = |r: f64, c: f64, cx: f64| {
        let dy = (r - 0.5 * s) / (0.36 * s);
        let dx = (c - cx) / (0.17 * s);
        dy * dy + dx * dx <= 1.0
    };
    let mask = (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            inside(r, c, 0.29 * s) || inside(r, c, 0.71 * s)
        })
        .collect();
    LungMask::new(size, size, mask).expect("lungs are non-empty")
}

/// `(count range, amplitude range)` of opacities for a class.
fn opacity_profile(mode: SignalMode, label: usize) -> ((usize, usize), (f64, f64)) {
    const FAINT: ((usize, usize), (f64, f64)) = ((0, 1), (12.0, 28.0));
    const MODERATE: ((usize, usize), (f64, f64)) = ((2, 3), (28.0, 48.0));
    const SEVERE: ((usize, usize), (f64, f64)) = ((4, 6), (45.0, 70.0));
    match (mode, label) {
        (SignalMode::ImageDominant, LOW) | (SignalMode::Complementary, LOW) => FAINT,
        (SignalMode::ImageDominant, INTERMEDIATE) => MODERATE,
        (SignalMode::ImageDominant, _) => SEVERE,
        (SignalMode::Complementary, _) => MODERATE,
        (SignalMode::ClinicalDominant, _) => ((0, 3), (12.0, 48.0)),
    }
}

fn radiograph(cfg: &SynthConfig, mask: &LungMask, label: usize, rng: &mut ChaCha8Rng) -> RawImage {
    let size = cfg.raw_size;
    let s = size as f64;
    let mut px: Vec<f64> = mask
        .cells()
        .iter()
        .map(|&lung| if lung { 60.0 } else { 150.0 } + 10.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let ((lo, hi), (amp_lo, amp_hi)) = opacity_profile(cfg.signal_mode, label);
    let count = rng.gen_range(lo..=hi);
    let lung_cells: Vec<usize> = mask.cells().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    for _ in 0..count {
        let centre = lung_cells[rng.gen_range(0..lung_cells.len())];
        let (cy, cx) = ((centre / size) as f64, (centre % size) as f64);
        let amp = cfg.image_signal * rng.gen_range(amp_lo..amp_hi);
        let sigma = rng.gen_range(0.04..0.08) * s;
        let aspect = rng.gen_range(0.6..1.6);
        for (i, p) in px.iter_mut().enumerate() {
            let (dy, dx) = ((i / size) as f64 - cy, ((i % size) as f64 - cx) * aspect);
            let d2 = (dy * dy + dx * dx) / (2.0 * sigma * sigma);
            if d2 < 12.0 {
                *p += amp * (-d2).exp();
            }
        }
    }
    RawImage::new(size, size, px.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
        .expect("square image")
}

fn outcome_for(label: usize, id: &str, include_intubation: bool, rng: &mut ChaCha8Rng) -> OutcomeRecord {
    let mut o = OutcomeRecord {
        subject_id: id.to_string(),
        los_days: 0.0,
        icu: false,
        died: false,
        intubated: false,
    };
    match label {
        LOW => o.los_days = rng.gen_range(0.1..0.95),
        INTERMEDIATE => {
            o.los_days = rng.gen_range(1.0..14.0);
            // Only matters when intubation does not define the high class.
            o.intubated = !include_intubation && rng.gen_bool(0.1);
        }
        _ => {
            o.los_days = rng.gen_range(0.5..30.0);
            match rng.gen_range(0..3) {
                0 => o.died = true,
                1 => o.icu = true,
                _ => {
                    o.icu = true;
                    o.died = true;
                }
            }
            o.intubated = rng.gen_bool(0.4);
        }
    }
    o.los_days = (o.los_days * 1000.0).round() / 1000.0;
    o
}

/// 60/20/20 per class with a seeded shuffle.
fn stratified_split(labels: &[usize], seed: u64) -> Vec<Split> {
    let mut rng = stream(seed, STREAM_SPLIT);
    let mut out = vec![Split::Train; labels.len()];
    for c in 0..3 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (0.6 * n as f64).round() as usize;
        let n_val = (0.2 * n as f64).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub dataset: Dataset,
}

/// Writes a complete dataset tree under `out_dir` and returns its handle.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let io = |e: std::io::Error| Error::io(out_dir, e);
    std::fs::create_dir_all(out_dir.join("images")).map_err(io)?;
    std::fs::create_dir_all(out_dir.join("masks")).map_err(io)?;

    let schema = synth_schema(cfg);
    let rates = cfg.missing_rates.clone().unwrap_or_else(|| default_missing_rates(schema.len()));
    let models = feature_models(cfg, &rates);
    let missing = missing_masks(&rates, cfg.n_subjects, cfg.seed);
    let mask = lung_mask(cfg.raw_size);
    let start = NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time");
    let class_dist = WeightedIndex::new(cfg.priors).expect("validated priors");

    let mut entries = Vec::with_capacity(cfg.n_subjects);
    let mut records = Vec::new();
    let mut outcomes = Vec::with_capacity(cfg.n_subjects);
    let mut labels = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let mut rng = stream(cfg.seed, i as u64);
        let id = format!("S{i:04}");
        let label = class_dist.sample(&mut rng);
        let image = radiograph(cfg, &mask, label, &mut rng);
        let image_path = out_dir.join("images").join(format!("{id}.png"));
        let mask_path = out_dir.join("masks").join(format!("{id}.png"));
        save_gray(&image_path, &image)?;
        let mask_img = RawImage::new(
            cfg.raw_size,
            cfg.raw_size,
            mask.cells().iter().map(|&m| if m { 255 } else { 0 }).collect(),
        )?;
        save_gray(&mask_path, &mask_img)?;

        let image_time: NaiveDateTime =
            start + Duration::minutes(rng.gen_range(0..120 * 24 * 60) as i64);
        let jitter = Duration::minutes((rng.gen_range(-1.0..=1.0) * cfg.ehr_jitter_hours * 60.0).round() as i64);
        let shift = clinical_shift(cfg.signal_mode, label);
        records.push(ClinicalRecord {
            subject_id: id.clone(),
            timestamp: image_time + jitter,
            values: clinical_values(&schema, &models, shift, cfg.clinical.effect_size, &missing[i], &mut rng),
        });
        if rng.gen_bool(cfg.stale_record_rate) {
            let hours = rng.gen_range(30..=72) * if rng.gen_bool(0.5) { 1 } else { -1 };
            // A record from another encounter: drawn without class signal.
            records.push(ClinicalRecord {
                subject_id: id.clone(),
                timestamp: image_time + Duration::hours(hours),
                values: clinical_values(&schema, &models, 0.0, 0.0, &missing[i], &mut rng),
            });
        }
        let outcome = outcome_for(label, &id, cfg.include_intubation, &mut rng);
        debug_assert_eq!(derive_risk_label(&outcome, cfg.include_intubation), label);
        labels.push(label);
        outcomes.push(outcome);
        entries.push(ManifestEntry {
            subject_id: id.clone(),
            image_path: format!("images/{id}.png"),
            mask_path: format!("masks/{id}.png"),
            image_timestamp: image_time,
        });
    }
    let splits = stratified_split(&labels, cfg.seed);

    let write = |name: &str, bytes: Vec<u8>| std::fs::write(out_dir.join(name), bytes).map_err(|e| Error::io(out_dir.join(name), e));
    write(SCHEMA_FILE, schema.to_text().into_bytes())?;
    let mut buf = Vec::new();
    write_clinical_csv(&mut buf, &schema, &records)?;
    write(CLINICAL_FILE, buf)?;
    let mut buf = Vec::new();
    write_outcomes(&mut buf, &outcomes)?;
    write(OUTCOMES_FILE, buf)?;
    let mut buf = Vec::new();
    write_split(&mut buf, entries.iter().map(|e| e.subject_id.as_str()).zip(splits.iter().copied()))?;
    write(SPLIT_FILE, buf)?;
    let manifest = serde_json::to_vec_pretty(&entries)?;
    write(MANIFEST_FILE, manifest)?;
    write("synth_config.json", serde_json::to_vec_pretty(cfg)?)?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let dataset = ingest_external(&manifest_path, cfg.include_intubation)?;
    debug_assert!(dataset.excluded.is_empty());
    Ok(GeneratedDataset { manifest_path, dataset })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: SignalMode, seed: u64) -> SynthConfig {
        SynthConfig {
            n_subjects: 60,
            image_size: 16,
            raw_size: 24,
            signal_mode: mode,
            seed,
            ..SynthConfig::default()
        }
    }

    fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "images", "masks"] {
            let d = dir.join(sub);
            let mut names: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names.into_iter().filter(|p| p.is_file()) {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
        out
    }

    #[test]
    fn same_seed_gives_identical_trees() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&small(SignalMode::Complementary, 4), a.path()).unwrap();
        generate(&small(SignalMode::Complementary, 4), b.path()).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
        let c = tempfile::tempdir().unwrap();
        generate(&small(SignalMode::Complementary, 5), c.path()).unwrap();
        assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
    }

    #[test]
    fn reingest_matches_generated_handle() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate(&small(SignalMode::ImageDominant, 1), dir.path()).unwrap();
        let d = ingest_external(&g.manifest_path, true).unwrap();
        assert_eq!(d, g.dataset);
    }

    #[test]
    fn labels_follow_outcomes_and_split_is_stratified() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate(&small(SignalMode::Complementary, 2), dir.path()).unwrap();
        for s in &g.dataset.subjects {
            assert_eq!(derive_risk_label(&s.outcome, true), s.label);
        }
        for c in 0..3 {
            let of = |sp: Split| g.dataset.subjects.iter().filter(|s| s.label == c && s.split == sp).count();
            let n = of(Split::Train) + of(Split::Val) + of(Split::Test);
            assert!((of(Split::Train) as f64 - 0.6 * n as f64).abs() <= 1.0);
            assert!((of(Split::Val) as f64 - 0.2 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn default_rates_include_one_droppable_feature() {
        let r = default_missing_rates(24);
        assert_eq!(r.iter().filter(|&&x| x > 0.4).count(), 1);
        assert!(r.iter().all(|x| (0.0..=0.6).contains(x)));
    }

    #[test]
    fn class_frequencies_and_missingness_match_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_subjects: 1000,
            raw_size: 16,
            image_size: 8,
            stale_record_rate: 0.0,
            seed: 12,
            ..SynthConfig::default()
        };
        let g = generate(&cfg, dir.path()).unwrap();
        let n = g.dataset.subjects.len() as f64;
        assert_eq!(n, 1000.0);
        for (c, &p) in cfg.priors.iter().enumerate() {
            let k = g.dataset.subjects.iter().filter(|s| s.label == c).count() as f64;
            assert!((k - n * p).abs() <= 3.0 * (n * p * (1.0 - p)).sqrt(), "class {c}: {k}");
        }
        let rates = default_missing_rates(cfg.clinical.num_features());
        for (spec, rate) in g.dataset.schema.features().iter().zip(rates) {
            let miss = g.dataset.subjects.iter().filter(|s| s.record.value(&spec.name).is_missing()).count() as f64;
            assert!((miss / n - rate).abs() <= 0.02, "{}", spec.name);
        }
    }
}
