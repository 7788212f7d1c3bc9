//! Model file format.
//!
//! A model is two files: a UTF-8 JSON manifest and a headerless blob of
//! little-endian IEEE-754 `f32` values. Tensors are concatenated in manifest
//! order with byte offsets from 0 and no alignment padding.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::builders::build_architecture;
use super::{Architecture, InputSpec, Model, ModelGraph, Node, Weights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &str = "DWMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length in the blob.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub magic: String,
    pub format_version: u32,
    pub architecture: Architecture,
    pub input: InputSpec,
    pub labels: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    /// Node list; present only for `custom` architectures, whose topology
    /// cannot be rebuilt from the architecture id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<Vec<Node>>,
}

impl ModelManifest {
    /// Manifest for a graph with tensors laid out back to back.
    pub fn describe(graph: &ModelGraph) -> ModelManifest {
        let mut offset = 0u64;
        let tensors = graph
            .param_specs()
            .into_iter()
            .map(|spec| {
                let length = 4 * spec.shape.iter().product::<usize>() as u64;
                let entry = TensorEntry {
                    name: spec.name,
                    dtype: "f32".into(),
                    shape: spec.shape,
                    offset,
                    length,
                };
                offset += length;
                entry
            })
            .collect();
        ModelManifest {
            magic: MODEL_MAGIC.into(),
            format_version: FORMAT_VERSION,
            architecture: graph.architecture(),
            input: graph.input_spec().clone(),
            labels: graph.labels().to_vec(),
            tensors,
            graph: (graph.architecture() == Architecture::Custom).then(|| graph.nodes().to_vec()),
        }
    }

    pub fn blob_len(&self) -> u64 {
        self.tensors
            .iter()
            .map(|t| t.offset + t.length)
            .max()
            .unwrap_or(0)
    }

    /// Trainable parameter count from the tensor table (running statistics
    /// excluded).
    pub fn parameter_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| !t.name.ends_with(".running_mean") && !t.name.ends_with(".running_var"))
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }

    fn check_table(&self) -> Result<()> {
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if t.dtype != "f32" {
                return Err(Error::Validation {
                    tensor: t.name.clone(),
                    reason: format!("unsupported dtype `{}`", t.dtype),
                });
            }
            let expect = 4 * t.shape.iter().product::<usize>() as u64;
            if t.shape.is_empty() || t.shape.contains(&0) || t.length != expect {
                return Err(Error::Validation {
                    tensor: t.name.clone(),
                    reason: format!(
                        "byte length {} does not match shape {:?} ({expect} bytes)",
                        t.length, t.shape
                    ),
                });
            }
            spans.push((t.offset, t.offset + t.length, &t.name));
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Validation {
                    tensor: pair[1].2.to_string(),
                    reason: format!("overlaps tensor `{}`", pair[0].2),
                });
            }
        }
        Ok(())
    }
}

/// Manifest + blob locations. A model directory holds `model.json` and
/// `model.bin`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelPaths {
    pub manifest: PathBuf,
    pub blob: PathBuf,
}

impl ModelPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        ModelPaths {
            manifest: dir.join("model.json"),
            blob: dir.join("model.bin"),
        }
    }
}

/// Everything read from a model file, before binding.
#[derive(Clone, Debug)]
pub struct ModelFile {
    pub graph: ModelGraph,
    pub weights: Weights,
    pub manifest: ModelManifest,
}

impl ModelFile {
    pub fn into_model(self, fold_bn: bool) -> Result<Model> {
        Model::from_parts(self.graph, &self.weights, fold_bn)
    }
}

/// Writes the blob and manifest. Fails before touching disk if any tensor is
/// missing.
pub fn save_model(
    graph: &ModelGraph,
    weights: &Weights,
    manifest_path: impl AsRef<Path>,
    blob_path: impl AsRef<Path>,
) -> Result<()> {
    weights.check_against(graph)?;
    let manifest = ModelManifest::describe(graph);
    let blob_path = blob_path.as_ref();
    let manifest_path = manifest_path.as_ref();

    let file = fs::File::create(blob_path).map_err(|e| Error::io(blob_path, e))?;
    let mut out = BufWriter::new(file);
    for entry in &manifest.tensors {
        let t = weights.take(&entry.name)?;
        for v in t.data() {
            out.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(blob_path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(blob_path, e))?;

    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

/// Reads and validates a model file without binding it.
pub fn load_parts(manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<ModelFile> {
    let manifest_path = manifest_path.as_ref();
    let blob_path = blob_path.as_ref();
    let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = parse_manifest(&text)?;
    manifest.check_table()?;

    let graph = match manifest.architecture {
        Architecture::Custom => {
            let nodes = manifest.graph.clone().ok_or_else(|| {
                Error::Format("custom architecture without a `graph` description".into())
            })?;
            ModelGraph::new(
                Architecture::Custom,
                manifest.input.clone(),
                manifest.labels.clone(),
                nodes,
            )?
        }
        arch => {
            if manifest.labels.len() < 2 {
                return Err(Error::Format(format!(
                    "manifest lists {} labels; at least 2 are required",
                    manifest.labels.len()
                )));
            }
            let mut g = build_architecture(arch, manifest.labels.len(), manifest.input.clone())?;
            g.labels.clone_from(&manifest.labels);
            g
        }
    };

    let specs = graph.param_specs();
    for spec in &specs {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == spec.name)
            .ok_or_else(|| Error::Validation {
                tensor: spec.name.clone(),
                reason: format!("required by {} but absent from the manifest", graph.architecture().id()),
            })?;
        if entry.shape != spec.shape {
            return Err(Error::Validation {
                tensor: spec.name.clone(),
                reason: format!(
                    "shape {:?} does not match {} ({:?})",
                    entry.shape,
                    graph.architecture().id(),
                    spec.shape
                ),
            });
        }
    }
    if let Some(extra) = manifest
        .tensors
        .iter()
        .find(|t| !specs.iter().any(|s| s.name == t.name))
    {
        return Err(Error::Validation {
            tensor: extra.name.clone(),
            reason: format!("not part of {}", graph.architecture().id()),
        });
    }

    let blob = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    let needed = manifest.blob_len();
    if (blob.len() as u64) < needed {
        return Err(Error::Truncated {
            needed,
            found: blob.len() as u64,
        });
    }

    let mut weights = Weights::new();
    for entry in &manifest.tensors {
        let bytes = &blob[entry.offset as usize..(entry.offset + entry.length) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        weights.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok(ModelFile {
        graph,
        weights,
        manifest,
    })
}

/// Loads, validates and binds a model; optionally folds batch-norms.
pub fn load_model(
    manifest_path: impl AsRef<Path>,
    blob_path: impl AsRef<Path>,
    fold_bn: bool,
) -> Result<Model> {
    load_parts(manifest_path, blob_path)?.into_model(fold_bn)
}

fn parse_manifest(bytes: &[u8]) -> Result<ModelManifest> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::Format(format!("manifest is not valid JSON: {e}")))?;
    match value.get("magic").and_then(|m| m.as_str()) {
        Some(MODEL_MAGIC) => {}
        other => {
            return Err(Error::Format(format!(
                "bad magic {other:?}, expected \"{MODEL_MAGIC}\""
            )))
        }
    }
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => {
            return Err(Error::Format(format!(
                "unsupported format_version {other:?}, expected {FORMAT_VERSION}"
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("malformed manifest: {e}")))
}
