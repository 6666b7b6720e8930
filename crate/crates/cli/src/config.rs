//! JSON run configuration: every `TrainConfig` key plus paths and experiment
//! settings. Unknown keys are rejected. Command-line flags override file
//! values; a seed absent from both falls back to `VCF_SEED`.

use std::path::{Path, PathBuf};

use mdvc_core::train::{TrainConfig, Variant};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "VCF_SEED";

/// Keys handled here rather than by `TrainConfig`.
const OWN_KEYS: [&str; 5] = ["corpus", "out", "variants", "seeds", "jobs"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CliConfig {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variants: Option<Vec<Variant>>,
    pub seeds: Option<Vec<u64>>,
    pub jobs: Option<usize>,
    pub train: TrainConfig,
    /// Whether the file set `seed` explicitly.
    pub seed_given: bool,
}

fn take<T: serde::de::DeserializeOwned>(map: &mut Map<String, Value>, key: &str) -> Result<Option<T>> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))),
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let Value::Object(mut map) = value else {
            return Err(CliError::Usage("config must be a JSON object".into()));
        };
        let mut out = CliConfig {
            corpus: take(&mut map, OWN_KEYS[0])?,
            out: take(&mut map, OWN_KEYS[1])?,
            variants: take(&mut map, OWN_KEYS[2])?,
            seeds: take(&mut map, OWN_KEYS[3])?,
            jobs: take(&mut map, OWN_KEYS[4])?,
            seed_given: map.contains_key("seed"),
            ..Default::default()
        };
        out.train = serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// The file at `path`, or defaults when there is none.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Seed precedence: flag, then config file, then `VCF_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
