//! Optional TOML config file and the resolved-config snapshot.

use std::path::Path;

use fuselearn::experiment::ProtocolSpec;
use fuselearn::fusion::TrainSpec;
use fuselearn::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Model choices a config file may set; CLI flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: Option<String>,
    pub img_feat_dim: Option<String>,
    pub image_size: Option<usize>,
    pub precision: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub synth: Option<SynthConfig>,
    pub train: Option<TrainSpec>,
    pub model: ModelSection,
    pub protocol: Option<ProtocolSpec>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }
}

/// Writes `resolved_config.json` into `dir`.
pub fn write_snapshot(dir: &Path, command: &str, resolved: serde_json::Value) -> Result<(), CliError> {
    let snapshot = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "resolved": resolved,
    });
    let path = dir.join("resolved_config.json");
    let text = serde_json::to_string_pretty(&snapshot).expect("plain data");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}
