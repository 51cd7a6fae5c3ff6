//! Run configuration: one JSON document with data, training and path
//! sections. Command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use aarr_core::data::SyntheticSpec;
use aarr_core::trainer::TrainConfig;
use aarr_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The resolved config plus constants fixed in code.
    pub fn echo(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["constants"] = TrainConfig::fixed_constants();
        let mut s = serde_json::to_string_pretty(&v).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Thread count from `AARR_THREADS`, if set.
pub fn env_threads() -> Result<Option<usize>, Error> {
    match std::env::var("AARR_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("AARR_THREADS must be a positive integer, got {s:?}"))),
        },
        Err(_) => Ok(None),
    }
}
