use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Binary,
    Categorical { vocab: Vec<String> },
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

/// Ordered feature declarations; the order fixes the encoded layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypedFeatureSchema {
    features: Vec<FeatureSpec>,
}

impl TypedFeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &features {
            if f.name == "subject_id" || f.name == "timestamp" {
                return Err(Error::Config(format!("feature name `{}` is reserved", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Config(format!("duplicate feature `{}`", f.name)));
            }
            if let FeatureKind::Categorical { vocab } = &f.kind {
                if vocab.is_empty() {
                    return Err(Error::Config(format!("categorical feature `{}` has an empty vocabulary", f.name)));
                }
            }
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Parses the line format `name<TAB>kind<TAB>cat1|cat2|...`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut features = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |why: &str| Error::Config(format!("schema line {}: {why}", lineno + 1));
            if cols.len() < 2 {
                return Err(bad("expected `name<TAB>kind[<TAB>vocab]`"));
            }
            let kind = match cols[1] {
                "binary" => FeatureKind::Binary,
                "continuous" => FeatureKind::Continuous,
                "categorical" => {
                    let vocab: Vec<String> = cols
                        .get(2)
                        .map(|v| v.split('|').filter(|s| !s.is_empty()).map(str::to_string).collect())
                        .unwrap_or_default();
                    FeatureKind::Categorical { vocab }
                }
                other => return Err(bad(&format!("unknown kind `{other}`"))),
            };
            features.push(FeatureSpec {
                name: cols[0].to_string(),
                kind,
            });
        }
        Self::new(features)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in &self.features {
            match &f.kind {
                FeatureKind::Binary => out.push_str(&format!("{}\tbinary\t\n", f.name)),
                FeatureKind::Continuous => out.push_str(&format!("{}\tcontinuous\t\n", f.name)),
                FeatureKind::Categorical { vocab } => {
                    out.push_str(&format!("{}\tcategorical\t{}\n", f.name, vocab.join("|")))
                }
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RawValue {
    Missing,
    Binary(bool),
    Category(String),
    Number(f64),
}

impl RawValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, RawValue::Missing)
    }

    fn to_cell(&self) -> String {
        match self {
            RawValue::Missing => String::new(),
            RawValue::Binary(b) => if *b { "1" } else { "0" }.to_string(),
            RawValue::Category(c) => c.clone(),
            RawValue::Number(x) => format!("{x}"),
        }
    }
}

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim().trim_end_matches('Z');
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .map_err(|e| Error::Data(vec![format!("bad timestamp `{s}`: {e}")]))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// One row of EHR data. Features absent from `values` count as missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalRecord {
    pub subject_id: String,
    pub timestamp: NaiveDateTime,
    pub values: BTreeMap<String, RawValue>,
}

impl ClinicalRecord {
    pub fn value(&self, name: &str) -> &RawValue {
        self.values.get(name).unwrap_or(&RawValue::Missing)
    }

    /// Checks every present value against its declared kind.
    pub fn validate(&self, schema: &TypedFeatureSchema) -> Result<()> {
        for (name, v) in &self.values {
            let Some(spec) = schema.get(name) else {
                return Err(Error::Data(vec![format!("{}: undeclared feature `{name}`", self.subject_id)]));
            };
            let ok = matches!(
                (&spec.kind, v),
                (_, RawValue::Missing)
                    | (FeatureKind::Binary, RawValue::Binary(_))
                    | (FeatureKind::Categorical { .. }, RawValue::Category(_))
                    | (FeatureKind::Continuous, RawValue::Number(_))
            );
            if !ok {
                return Err(Error::Data(vec![format!(
                    "{}: value {v:?} does not conform to feature `{name}`",
                    self.subject_id
                )]));
            }
        }
        Ok(())
    }
}

fn parse_cell(spec: &FeatureSpec, cell: &str) -> std::result::Result<RawValue, String> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(RawValue::Missing);
    }
    match &spec.kind {
        FeatureKind::Binary => match cell.to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" => Ok(RawValue::Binary(true)),
            "0" | "false" | "no" => Ok(RawValue::Binary(false)),
            _ => Err(format!("`{cell}` is not a binary value for `{}`", spec.name)),
        },
        FeatureKind::Categorical { .. } => Ok(RawValue::Category(cell.to_string())),
        FeatureKind::Continuous => cell
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .map(RawValue::Number)
            .ok_or_else(|| format!("`{cell}` is not a finite number for `{}`", spec.name)),
    }
}

/// Reads a clinical CSV (`subject_id,timestamp,<features...>`).
/// Columns not in the schema are ignored; schema features absent from
/// the header are treated as missing everywhere.
pub fn read_clinical_csv(path: &Path, schema: &TypedFeatureSchema) -> Result<Vec<ClinicalRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_clinical_from(file, schema)
}

pub fn read_clinical_from<R: std::io::Read>(reader: R, schema: &TypedFeatureSchema) -> Result<Vec<ClinicalRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_col), Some(ts_col)) = (col("subject_id"), col("timestamp")) else {
        return Err(Error::Data(vec!["clinical CSV needs `subject_id` and `timestamp` columns".into()]));
    };
    let feature_cols: Vec<(usize, &FeatureSpec)> = schema
        .features()
        .iter()
        .filter_map(|f| col(&f.name).map(|c| (c, f)))
        .collect();
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let subject_id = rec.get(id_col).unwrap_or("").to_string();
        let timestamp = match parse_timestamp(rec.get(ts_col).unwrap_or("")) {
            Ok(t) => t,
            Err(e) => {
                problems.push(format!("row {}: {e}", row + 2));
                continue;
            }
        };
        let mut values = BTreeMap::new();
        for &(c, spec) in &feature_cols {
            match parse_cell(spec, rec.get(c).unwrap_or("")) {
                Ok(v) => {
                    values.insert(spec.name.clone(), v);
                }
                Err(e) => problems.push(format!("row {} ({subject_id}): {e}", row + 2)),
            }
        }
        records.push(ClinicalRecord {
            subject_id,
            timestamp,
            values,
        });
    }
    if problems.is_empty() {
        Ok(records)
    } else {
        Err(Error::Data(problems))
    }
}

pub fn write_clinical_csv<W: std::io::Write>(
    writer: W,
    schema: &TypedFeatureSchema,
    records: &[ClinicalRecord],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "timestamp".to_string()];
    header.extend(schema.features().iter().map(|f| f.name.clone()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.subject_id.clone(), format_timestamp(&r.timestamp)];
        row.extend(schema.features().iter().map(|f| r.value(&f.name).to_cell()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<clinical csv>", e))?;
    Ok(())
}
