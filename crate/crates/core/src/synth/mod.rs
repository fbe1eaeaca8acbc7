//! Deterministic multimodal cohorts with controllable per-modality signal.

mod dataset;
mod generate;
mod quadrant;

use serde::{Deserialize, Serialize};

pub use dataset::{
    ingest_external, read_outcomes, read_split, write_outcomes, write_split, Dataset, Exclusion, ManifestEntry,
    PreparedData, Split, Subject, CLINICAL_FILE, MANIFEST_FILE, OUTCOMES_FILE, SCHEMA_FILE, SPLIT_FILE,
};
pub use generate::{default_missing_rates, generate, synth_schema, GeneratedDataset};
pub use quadrant::{quadrant_images, quadrant_mass, QuadrantImage, QUADRANT_SHAPES};

use crate::error::{Error, Result};

/// Class indices.
pub const LOW: usize = 0;
pub const INTERMEDIATE: usize = 1;
pub const HIGH: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub subject_id: String,
    pub los_days: f64,
    pub icu: bool,
    pub died: bool,
    pub intubated: bool,
}

/// High if died, ICU or (optionally) intubated; otherwise low below one day of stay.
pub fn derive_risk_label(o: &OutcomeRecord, include_intubation: bool) -> usize {
    if o.died || o.icu || (include_intubation && o.intubated) {
        HIGH
    } else if o.los_days < 1.0 {
        LOW
    } else {
        INTERMEDIATE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    /// All three classes visible in the image; clinical features uninformative.
    ImageDominant,
    /// All three classes separable from clinical features; images uninformative.
    ClinicalDominant,
    /// Low vs intermediate only in the image, intermediate vs high only in the clinical features.
    Complementary,
}

impl std::str::FromStr for SignalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_dominant" | "image-dominant" => Ok(SignalMode::ImageDominant),
            "clinical_dominant" | "clinical-dominant" => Ok(SignalMode::ClinicalDominant),
            "complementary" => Ok(SignalMode::Complementary),
            other => Err(Error::Config(format!(
                "unknown signal mode `{other}` (image_dominant|clinical_dominant|complementary)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClinicalSpec {
    pub binary: usize,
    pub categorical: usize,
    pub continuous: usize,
    /// Fraction of features whose distribution depends on the class.
    pub informative_fraction: f64,
    /// Class shift of an informative feature, in within-class standard deviations.
    pub effect_size: f64,
}

impl Default for ClinicalSpec {
    fn default() -> Self {
        Self {
            binary: 8,
            categorical: 4,
            continuous: 12,
            informative_fraction: 0.5,
            effect_size: 0.9,
        }
    }
}

impl ClinicalSpec {
    pub fn num_features(&self) -> usize {
        self.binary + self.categorical + self.continuous
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// Network input size the dataset is intended for.
    pub image_size: usize,
    /// Side of the written radiographs (before lung cropping).
    pub raw_size: usize,
    pub priors: [f64; 3],
    pub signal_mode: SignalMode,
    pub clinical: ClinicalSpec,
    /// Per-feature MCAR rate in schema order; `None` uses [`default_missing_rates`].
    pub missing_rates: Option<Vec<f64>>,
    /// EHR rows fall uniformly within this many hours of the image.
    pub ehr_jitter_hours: f64,
    /// Chance that a subject also has a stale EHR row 30 to 72 hours away.
    pub stale_record_rate: f64,
    /// Scales opacity contrast in the images.
    pub image_signal: f64,
    pub include_intubation: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 1200,
            image_size: 64,
            raw_size: 80,
            priors: [0.287, 0.400, 0.313],
            signal_mode: SignalMode::Complementary,
            clinical: ClinicalSpec::default(),
            missing_rates: None,
            ehr_jitter_hours: 18.0,
            stale_record_rate: 0.2,
            image_signal: 1.0,
            include_intubation: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 10 {
            return Err(Error::Config("n_subjects must be at least 10".into()));
        }
        if (self.priors.iter().sum::<f64>() - 1.0).abs() > 1e-6 || self.priors.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config(format!("class priors {:?} must be positive and sum to 1", self.priors)));
        }
        if self.raw_size < crate::image::MIN_INPUT_EXTENT || self.image_size < crate::image::MIN_OUTPUT_SIZE {
            return Err(Error::Config("image sizes too small".into()));
        }
        if self.clinical.num_features() == 0 || !(0.0..=1.0).contains(&self.clinical.informative_fraction) {
            return Err(Error::Config("clinical spec needs features and an informative fraction in [0, 1]".into()));
        }
        if let Some(rates) = &self.missing_rates {
            if rates.len() != self.clinical.num_features() || rates.iter().any(|r| !(0.0..=0.6).contains(r)) {
                return Err(Error::Config("missing rates: one per feature, each in [0, 0.6]".into()));
            }
        }
        if !(self.ehr_jitter_hours >= 0.0 && self.ehr_jitter_hours <= 24.0) {
            return Err(Error::Config("EHR jitter must lie in [0, 24] hours".into()));
        }
        if !(0.0..=1.0).contains(&self.stale_record_rate) || !(self.image_signal >= 0.0) {
            return Err(Error::Config("stale_record_rate must be in [0, 1] and image_signal non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(los: f64, icu: bool, died: bool, intubated: bool) -> OutcomeRecord {
        OutcomeRecord {
            subject_id: "x".into(),
            los_days: los,
            icu,
            died,
            intubated,
        }
    }

    #[test]
    fn risk_label_rules() {
        assert_eq!(derive_risk_label(&outcome(0.5, false, false, false), true), LOW);
        assert_eq!(derive_risk_label(&outcome(3.0, false, false, false), true), INTERMEDIATE);
        assert_eq!(derive_risk_label(&outcome(3.0, true, false, false), true), HIGH);
        assert_eq!(derive_risk_label(&outcome(0.2, false, true, false), false), HIGH);
        assert_eq!(derive_risk_label(&outcome(3.0, false, false, true), true), HIGH);
        assert_eq!(derive_risk_label(&outcome(3.0, false, false, true), false), INTERMEDIATE);
    }

    #[test]
    fn config_validation() {
        SynthConfig::default().validate().unwrap();
        let bad = SynthConfig {
            priors: [0.5, 0.5, 0.5],
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            missing_rates: Some(vec![0.7; 24]),
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
