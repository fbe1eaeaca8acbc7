//! Tabular EHR preprocessing: schema, CSV I/O, EHR-to-image matching and
//! the fitted imputation/encoding pipeline.

mod ehr;
mod preprocess;
mod schema;

pub use ehr::{match_ehr_to_image, match_window};
pub use preprocess::{FittedFeature, FittedPreprocessor, DEFAULT_DROP_THRESHOLD};
pub use schema::{
    format_timestamp, parse_timestamp, read_clinical_csv, read_clinical_from, write_clinical_csv, ClinicalRecord,
    FeatureKind, FeatureSpec, RawValue, TypedFeatureSchema, TIMESTAMP_FORMAT,
};
