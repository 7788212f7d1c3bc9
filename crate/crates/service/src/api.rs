//! Wire types shared by the HTTP service and the CLI, and the one
//! classification routine both of them call.

use std::collections::BTreeMap;
use std::time::Instant;

use wastesort::dataset::{DatasetItem, DatasetStats};
use wastesort::graph::{forward, Model, ModelManifest};
use wastesort::imaging::{decode, to_input_tensor, ImageFormat};
use serde::{Deserialize, Serialize};

/// Largest accepted image upload.
pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

/// Optional per-label note attached to classify responses, e.g. local
/// disposal rules.
pub type LabelNotes = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfidence {
    pub label: String,
    pub confidence: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    /// Every class, highest confidence first.
    pub predictions: Vec<LabelConfidence>,
    pub model_id: String,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ClassifyResponse {
    pub fn top(&self) -> &LabelConfidence {
        &self.predictions[0]
    }
}

#[derive(Debug)]
pub enum ClassifyError {
    TooLarge(usize),
    UnsupportedFormat,
    Undecodable(String),
    Engine(wastesort::Error),
}

impl std::fmt::Display for ClassifyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassifyError::TooLarge(n) => {
                write!(f, "image is {n} bytes; the limit is {MAX_UPLOAD_BYTES}")
            }
            ClassifyError::UnsupportedFormat => f.write_str("image must be PNG or JPEG"),
            ClassifyError::Undecodable(reason) => write!(f, "image could not be decoded: {reason}"),
            ClassifyError::Engine(e) => write!(f, "inference failed: {e}"),
        }
    }
}

impl std::error::Error for ClassifyError {}

/// decode → preprocess → forward. Deterministic for identical bytes.
pub fn classify_bytes(model: &Model, bytes: &[u8], notes: &LabelNotes) -> Result<ClassifyResponse, ClassifyError> {
    let start = Instant::now();
    if bytes.len() > MAX_UPLOAD_BYTES {
        return Err(ClassifyError::TooLarge(bytes.len()));
    }
    let format = ImageFormat::sniff(bytes).ok_or(ClassifyError::UnsupportedFormat)?;
    let image = decode(bytes, format).map_err(|e| ClassifyError::Undecodable(e.to_string()))?;
    let input = to_input_tensor(&image, model.graph().input_spec()).map_err(ClassifyError::Engine)?;
    let prediction = forward(model, &input).map_err(ClassifyError::Engine)?;
    let mut predictions: Vec<LabelConfidence> = prediction
        .labels
        .iter()
        .zip(&prediction.confidences)
        .map(|(label, &confidence)| LabelConfidence {
            label: label.clone(),
            confidence,
        })
        .collect();
    // stable: equal confidences stay in class order
    predictions.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let note = notes.get(&predictions[0].label).cloned();
    Ok(ClassifyResponse {
        predictions,
        model_id: model.id().to_string(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        note,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_id: String,
    pub architecture: String,
    pub labels: Vec<String>,
}

impl HealthResponse {
    pub fn for_model(model: &Model) -> Self {
        HealthResponse {
            status: "ok".into(),
            model_id: model.id().to_string(),
            architecture: model.graph().architecture().id().to_string(),
            labels: model.labels().to_vec(),
        }
    }
}

/// Model manifest plus derived facts; weights are never included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub parameter_count: usize,
    pub bn_folded: bool,
    pub manifest: ModelManifest,
}

impl ModelInfo {
    pub fn for_model(model: &Model) -> Self {
        ModelInfo {
            model_id: model.id().to_string(),
            parameter_count: model.manifest().parameter_count(),
            bn_folded: model.is_bn_folded(),
            manifest: model.manifest().clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub labels: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    pub by_split: BTreeMap<String, usize>,
    pub total: usize,
}

impl From<DatasetStats> for StatsResponse {
    fn from(s: DatasetStats) -> Self {
        StatsResponse {
            labels: s.counts.iter().map(|(l, _)| l.clone()).collect(),
            counts: s.counts.into_iter().collect(),
            by_split: s.by_split,
            total: s.total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResponse {
    pub id: String,
    pub item: DatasetItem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemsResponse {
    pub count: usize,
    pub items: Vec<DatasetItem>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
