//! JSON run configuration. Flags override file values; unknown keys warn
//! and are otherwise ignored so configs stay forward compatible.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;
use serde_json::Value;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub noise_params: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub protocol: Option<u8>,
    pub mode: Option<String>,
    pub strategy: Option<String>,
    pub placement: Option<String>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub cache_size: Option<usize>,
    pub noise_set: Option<usize>,
    pub tol: Option<f64>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub seq_len: Option<usize>,
    pub trials: Option<u64>,
    pub seed: Option<u64>,
    pub corpus_seed: Option<u64>,
    pub workers: Option<usize>,
    pub sequences: Option<usize>,
}

const KNOWN_KEYS: &[&str] = &[
    "model",
    "cache",
    "noise_params",
    "out",
    "protocol",
    "mode",
    "strategy",
    "placement",
    "n",
    "k",
    "cache_size",
    "noise_set",
    "tol",
    "lambda",
    "lr",
    "steps",
    "batch",
    "seq_len",
    "trials",
    "seed",
    "corpus_seed",
    "workers",
    "sequences",
];

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    if let Value::Object(map) = &value {
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                eprintln!("warning: unknown config key `{key}` ignored");
            }
        }
    }
    let config = serde_json::from_value(value)
        .with_context(|| format!("interpreting config {}", path.display()))?;
    Ok(config)
}

/// Flag wins, then config value, then the built-in default.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag wins, then config value; error if neither is present.
pub fn require<T: Clone>(flag: Option<T>, file: Option<T>, what: &str) -> Result<T> {
    flag.or(file)
        .ok_or_else(|| anyhow::anyhow!("missing required option `{what}`"))
}
