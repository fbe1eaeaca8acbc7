mod data;
mod evaluate;
mod explain;
mod protocol;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use fuselearn::DType;
use serde::Serialize;

use crate::config::FileConfig;
use crate::error::CliError;

pub use data::{synth, train};
pub use evaluate::{compare, eval};
pub use explain::{gradcam, gradcheck};
pub use protocol::experiment;

pub struct Context {
    pub file: FileConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub(crate) fn parse<T: FromStr<Err = fuselearn::Error>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(CliError::from)
}

pub(crate) fn parse_dtype(s: Option<&str>) -> Result<DType, CliError> {
    s.unwrap_or("f32").parse().map_err(CliError::Config)
}

pub(crate) fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("plain data");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub(crate) fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
}

/// Runs `$body` with `$t` bound to the scalar type selected by `$dtype`.
macro_rules! with_dtype {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            fuselearn::DType::F32 => {
                type $t = f32;
                $body
            }
            fuselearn::DType::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}
pub(crate) use with_dtype;
