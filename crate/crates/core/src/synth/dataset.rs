use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::{derive_risk_label, OutcomeRecord};
use crate::clinical::{
    format_timestamp, match_ehr_to_image, parse_timestamp, read_clinical_csv, ClinicalRecord, FittedPreprocessor,
    TypedFeatureSchema,
};
use crate::error::{Error, Result};
use crate::fusion::Sample;
use crate::image::{load_gray, load_mask, ImagePipeline, LungMask, RawImage};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLINICAL_FILE: &str = "clinical.csv";
pub const SCHEMA_FILE: &str = "schema.tsv";
pub const OUTCOMES_FILE: &str = "outcomes.csv";
pub const SPLIT_FILE: &str = "split.csv";

mod timestamp {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &NaiveDateTime, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format_timestamp(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<NaiveDateTime, D::Error> {
        let s = String::deserialize(d)?;
        parse_timestamp(&s).map_err(serde::de::Error::custom)
    }
}

/// One line of the manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub image_path: String,
    pub mask_path: String,
    #[serde(with = "timestamp")]
    pub image_timestamp: NaiveDateTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub entry: ManifestEntry,
    /// The EHR row matched to the image.
    pub record: ClinicalRecord,
    pub outcome: OutcomeRecord,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Exclusion {
    pub subject_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub schema: TypedFeatureSchema,
    pub subjects: Vec<Subject>,
    pub excluded: Vec<Exclusion>,
    pub include_intubation: bool,
}

/// Network-ready splits with the fitted transforms needed at inference time.
#[derive(Debug, Clone)]
pub struct PreparedData<T> {
    pub preprocessor: FittedPreprocessor,
    pub pipeline: ImagePipeline,
    pub mean_clinical: Vec<f64>,
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

#[derive(Serialize, Deserialize)]
struct OutcomeRow {
    subject_id: String,
    los_days: f64,
    icu: u8,
    died: u8,
    intubated: u8,
}

pub fn write_outcomes<W: std::io::Write>(writer: W, outcomes: &[OutcomeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for o in outcomes {
        w.serialize(OutcomeRow {
            subject_id: o.subject_id.clone(),
            los_days: o.los_days,
            icu: o.icu as u8,
            died: o.died as u8,
            intubated: o.intubated as u8,
        })?;
    }
    w.flush().map_err(|e| Error::io("<outcomes csv>", e))
}

pub fn read_outcomes(path: &Path) -> Result<Vec<OutcomeRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<OutcomeRow>()
        .map(|row| {
            let row = row?;
            Ok(OutcomeRecord {
                subject_id: row.subject_id,
                los_days: row.los_days,
                icu: row.icu != 0,
                died: row.died != 0,
                intubated: row.intubated != 0,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SplitRow<S> {
    subject_id: S,
    split: Split,
}

pub fn write_split<'a, W: std::io::Write>(writer: W, rows: impl IntoIterator<Item = (&'a str, Split)>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (subject_id, split) in rows {
        w.serialize(SplitRow { subject_id, split })?;
    }
    w.flush().map_err(|e| Error::io("<split csv>", e))
}

pub fn read_split(path: &Path) -> Result<HashMap<String, Split>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<SplitRow<String>>().map(|row| row.map(|s| (s.subject_id, s.split)).map_err(Error::from)).collect()
}

fn required(dir: &Path, name: &str, problems: &mut Vec<String>) -> Option<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Some(p)
    } else {
        problems.push(format!("required file {} not found", p.display()));
        None
    }
}

/// Loads a dataset laid out as a manifest plus sibling files named by the `*_FILE` constants.
///
/// Every file-level and subject-level problem is collected into one `Error::Data`.
/// Subjects without an EHR row within 24 hours of their image are excluded and logged.
pub fn ingest_external(manifest_path: &Path, include_intubation: bool) -> Result<Dataset> {
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;

    let mut problems = Vec::new();
    let schema_path = required(&root, SCHEMA_FILE, &mut problems);
    let clinical_path = required(&root, CLINICAL_FILE, &mut problems);
    let outcomes_path = required(&root, OUTCOMES_FILE, &mut problems);
    let split_path = required(&root, SPLIT_FILE, &mut problems);
    let (Some(schema_path), Some(clinical_path), Some(outcomes_path), Some(split_path)) =
        (schema_path, clinical_path, outcomes_path, split_path)
    else {
        return Err(Error::Data(problems));
    };
    let schema = TypedFeatureSchema::load(&schema_path)?;
    let records = read_clinical_csv(&clinical_path, &schema)?;
    let outcomes: HashMap<String, OutcomeRecord> =
        read_outcomes(&outcomes_path)?.into_iter().map(|o| (o.subject_id.clone(), o)).collect();
    let splits = read_split(&split_path)?;
    let mut by_subject: BTreeMap<&str, Vec<ClinicalRecord>> = BTreeMap::new();
    for r in &records {
        if let Err(Error::Data(p)) = r.validate(&schema) {
            problems.extend(p);
        }
        by_subject.entry(r.subject_id.as_str()).or_default().push(r.clone());
    }

    let mut subjects = Vec::new();
    let mut excluded = Vec::new();
    for entry in entries {
        let id = &entry.subject_id;
        for (what, rel) in [("image", &entry.image_path), ("mask", &entry.mask_path)] {
            let p = root.join(rel);
            if !p.is_file() {
                problems.push(format!("{id}: {what} file {} not found", p.display()));
            }
        }
        let outcome = outcomes.get(id);
        if outcome.is_none() {
            problems.push(format!("{id}: no outcome row"));
        }
        let split = splits.get(id);
        if split.is_none() {
            problems.push(format!("{id}: no split assignment"));
        }
        let (Some(outcome), Some(&split)) = (outcome, split) else { continue };
        let own = by_subject.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        match match_ehr_to_image(entry.image_timestamp, own) {
            Some(record) => subjects.push(Subject {
                record: record.clone(),
                label: derive_risk_label(outcome, include_intubation),
                outcome: outcome.clone(),
                split,
                entry,
            }),
            None => {
                let reason = if own.is_empty() {
                    "no EHR rows".to_string()
                } else {
                    let nearest = own.iter().map(|r| (r.timestamp - entry.image_timestamp).abs()).min().unwrap_or_default();
                    format!("nearest EHR row is {:.1} h from the image (limit 24 h)", nearest.num_minutes() as f64 / 60.0)
                };
                log::warn!("excluding {id}: {reason}");
                excluded.push(Exclusion {
                    subject_id: id.clone(),
                    reason,
                });
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Data(problems));
    }
    if subjects.is_empty() {
        return Err(Error::Data(vec!["no subjects left after EHR matching".into()]));
    }
    Ok(Dataset {
        root,
        schema,
        subjects,
        excluded,
        include_intubation,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn label_counts(&self, split: Split) -> [usize; 3] {
        let mut c = [0; 3];
        self.split(split).for_each(|s| c[s.label] += 1);
        c
    }

    pub fn load_image(&self, subject: &Subject) -> Result<(RawImage, LungMask)> {
        Ok((load_gray(&self.root.join(&subject.entry.image_path))?, load_mask(&self.root.join(&subject.entry.mask_path))?))
    }

    /// Network-ready samples of one split under already fitted transforms.
    pub fn samples<T: Scalar>(
        &self,
        split: Split,
        pipeline: &ImagePipeline,
        preprocessor: &FittedPreprocessor,
    ) -> Result<Vec<Sample<T>>> {
        self.split(split)
            .map(|s| {
                let (raw, mask) = self.load_image(s)?;
                let img = pipeline.run::<T>(&raw, &mask)?;
                Ok(Sample {
                    id: s.entry.subject_id.clone(),
                    image: Some(Arc::new(img.tensor)),
                    clinical: preprocessor.transform(&s.record),
                    label: s.label,
                })
            })
            .collect()
    }

    /// Fits the clinical transform on the training split and preprocesses every subject.
    pub fn prepare<T: Scalar>(&self, pipeline: &ImagePipeline, drop_threshold: f64) -> Result<PreparedData<T>> {
        pipeline.validate()?;
        let train_records: Vec<ClinicalRecord> = self.split(Split::Train).map(|s| s.record.clone()).collect();
        let preprocessor = FittedPreprocessor::fit(&train_records, &self.schema, drop_threshold)?;
        let mean_clinical = preprocessor.mean_vector(&train_records);
        Ok(PreparedData {
            train: self.samples(Split::Train, pipeline, &preprocessor)?,
            val: self.samples(Split::Val, pipeline, &preprocessor)?,
            test: self.samples(Split::Test, pipeline, &preprocessor)?,
            preprocessor,
            pipeline: pipeline.clone(),
            mean_clinical,
        })
    }

    /// Subject by id.
    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.entry.subject_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical::{FeatureKind, DEFAULT_DROP_THRESHOLD};
    use crate::synth::{generate, SynthConfig};

    fn tiny(dir: &Path) -> Dataset {
        let cfg = SynthConfig {
            n_subjects: 90,
            image_size: 16,
            raw_size: 24,
            seed: 9,
            ..SynthConfig::default()
        };
        generate(&cfg, dir).unwrap().dataset
    }

    #[test]
    fn missing_image_names_subject_and_path() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny(dir.path());
        let victim = &d.subjects[3].entry;
        std::fs::remove_file(dir.path().join(&victim.image_path)).unwrap();
        let err = ingest_external(&dir.path().join(MANIFEST_FILE), true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&victim.subject_id) && msg.contains(&victim.image_path), "{msg}");
    }

    #[test]
    fn missing_sidecar_files_are_all_listed() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        std::fs::remove_file(dir.path().join(OUTCOMES_FILE)).unwrap();
        std::fs::remove_file(dir.path().join(SPLIT_FILE)).unwrap();
        match ingest_external(&dir.path().join(MANIFEST_FILE), true).unwrap_err() {
            Error::Data(p) => assert_eq!(p.len(), 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn distant_ehr_excludes_subject() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny(dir.path());
        // Move every row of one subject 30 hours away from its image.
        let id = d.subjects[0].entry.subject_id.clone();
        let image_time = d.subjects[0].entry.image_timestamp;
        let mut records = read_clinical_csv(&dir.path().join(CLINICAL_FILE), &d.schema).unwrap();
        records.retain(|r| r.subject_id != id || r.timestamp == d.subjects[0].record.timestamp);
        for r in records.iter_mut().filter(|r| r.subject_id == id) {
            r.timestamp = image_time + chrono::Duration::hours(30);
        }
        let mut buf = Vec::new();
        crate::clinical::write_clinical_csv(&mut buf, &d.schema, &records).unwrap();
        std::fs::write(dir.path().join(CLINICAL_FILE), buf).unwrap();

        let again = ingest_external(&dir.path().join(MANIFEST_FILE), true).unwrap();
        assert_eq!(again.subjects.len(), d.subjects.len() - 1);
        assert_eq!(again.excluded.len(), 1);
        assert_eq!(again.excluded[0].subject_id, id);
        assert!(again.excluded[0].reason.contains("30.0 h"));
    }

    #[test]
    fn prepare_fits_on_train_and_encodes_all_splits() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny(dir.path());
        let p = d.prepare::<f32>(&ImagePipeline::with_size(16).unwrap(), DEFAULT_DROP_THRESHOLD).unwrap();
        assert_eq!(p.train.len() + p.val.len() + p.test.len(), d.subjects.len());
        assert_eq!(p.mean_clinical.len(), p.preprocessor.dim());
        // The half-missing feature is removed by the 40% rule; categoricals carry an unknown slot.
        assert_eq!(p.preprocessor.dropped(), ["cont_11"]);
        let expected_dim: usize = d
            .schema
            .features()
            .iter()
            .filter(|f| f.name != "cont_11")
            .map(|f| match &f.kind {
                FeatureKind::Categorical { vocab } => vocab.len() + 1,
                _ => 1,
            })
            .sum();
        assert_eq!(p.preprocessor.dim(), expected_dim);
        assert!(p.train.iter().all(|s| s.image.as_ref().unwrap().shape() == [3, 16, 16]));
    }

    #[test]
    fn split_and_outcome_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let o = vec![OutcomeRecord {
            subject_id: "a".into(),
            los_days: 2.5,
            icu: true,
            died: false,
            intubated: true,
        }];
        let p = dir.path().join("o.csv");
        let mut buf = Vec::new();
        write_outcomes(&mut buf, &o).unwrap();
        std::fs::write(&p, buf).unwrap();
        assert_eq!(read_outcomes(&p).unwrap(), o);
        let s = dir.path().join("s.csv");
        let mut buf = Vec::new();
        write_split(&mut buf, [("a", Split::Val), ("b", Split::Test)]).unwrap();
        std::fs::write(&s, buf).unwrap();
        let m = read_split(&s).unwrap();
        assert_eq!((m["a"], m["b"]), (Split::Val, Split::Test));
    }
}
