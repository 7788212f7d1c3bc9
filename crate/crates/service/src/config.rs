use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use wastesort::graph::{load_model, Model, ModelPaths};
use serde::{Deserialize, Serialize};

pub const MODEL_DIR_ENV: &str = "WASTESORT_MODEL_DIR";
pub const DATASET_DIR_ENV: &str = "WASTESORT_DATASET_DIR";

/// Service settings, usually read from a JSON file. Missing fields take
/// their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Directory holding `model.json` and `model.bin`.
    pub model_dir: PathBuf,
    pub dataset_root: PathBuf,
    pub bind: String,
    /// Origins allowed by CORS; `"*"` allows any.
    pub cors_origins: Vec<String>,
    /// Text attached to classify responses whose top label matches.
    pub label_notes: BTreeMap<String, String>,
    pub fold_batchnorm: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            model_dir: PathBuf::from("model"),
            dataset_root: PathBuf::from("dataset"),
            bind: "127.0.0.1:8080".into(),
            cors_origins: vec!["http://localhost:5173".into(), "http://127.0.0.1:5173".into()],
            label_notes: BTreeMap::new(),
            fold_batchnorm: true,
        }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Loads a model directory, with a message naming the directory on failure.
pub fn load_model_dir(dir: &Path, fold_batchnorm: bool) -> anyhow::Result<Model> {
    let paths = ModelPaths::in_dir(dir);
    load_model(&paths.manifest, &paths.blob, fold_batchnorm)
        .with_context(|| format!("loading model from {}", dir.display()))
}
