//! Checkpoints: a JSON manifest plus a little-endian `f32` payload file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::config::{TrainConfig, Variant};
use crate::corpus::{AttributeEntry, AttributeVocab};
use crate::encoder::{fingerprint, WordVocab};
use crate::error::{Error, Result};
use crate::model::{Group, Model, Param, ParamStore};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub variant: Variant,
    pub config: TrainConfig,
    pub word_vocab_sha256: String,
    pub attribute_vocab_sha256: String,
    pub words: Vec<String>,
    pub attributes: Vec<AttributeEntry>,
    pub train_counts: BTreeMap<String, usize>,
    pub payload: String,
    pub payload_bytes: usize,
    pub payload_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Payload file that sits next to a manifest.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn attribute_fingerprint(entries: &[AttributeEntry]) -> String {
    let lines: Vec<String> = entries
        .iter()
        .map(|e| format!("{}\t{}", e.id, e.phrase.as_deref().unwrap_or("")))
        .collect();
    fingerprint(lines.iter().map(String::as_str))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for p in model.params.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
            byte_offset: payload.len(),
        });
        payload.extend(p.value.to_f32_le_bytes());
    }
    let payload_file = payload_path(path);
    let attributes = model.attributes.entries();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        variant: model.variant(),
        config: model.config.clone(),
        word_vocab_sha256: model.words.fingerprint(),
        attribute_vocab_sha256: attribute_fingerprint(&attributes),
        words: model.words.words().to_vec(),
        attributes,
        train_counts: model.train_counts.clone(),
        payload: payload_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| bad(path, "checkpoint path has no file name"))?,
        payload_bytes: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors,
    };
    std::fs::write(&payload_file, &payload).map_err(io_err(&payload_file))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, json).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| bad(path, format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(
            path,
            format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    if manifest.variant != manifest.config.variant {
        return Err(bad(path, "variant disagrees with the stored configuration"));
    }
    let words =
        WordVocab::from_words(manifest.words.clone()).map_err(|e| bad(path, e.to_string()))?;
    if words.fingerprint() != manifest.word_vocab_sha256 {
        return Err(bad(path, "word vocabulary hash mismatch"));
    }
    if attribute_fingerprint(&manifest.attributes) != manifest.attribute_vocab_sha256 {
        return Err(bad(path, "attribute vocabulary hash mismatch"));
    }
    let attributes =
        AttributeVocab::new(manifest.attributes.clone()).map_err(|e| bad(path, e.to_string()))?;

    let payload_file = path.with_file_name(&manifest.payload);
    let payload = std::fs::read(&payload_file).map_err(io_err(&payload_file))?;
    if payload.len() != manifest.payload_bytes {
        return Err(bad(
            path,
            format!(
                "payload {} has {} bytes, expected {} (truncated or replaced)",
                payload_file.display(),
                payload.len(),
                manifest.payload_bytes
            ),
        ));
    }
    if hex::encode(Sha256::digest(&payload)) != manifest.payload_sha256 {
        return Err(bad(path, "payload hash mismatch"));
    }

    let mut store = ParamStore::default();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.byte_offset + 4 * n;
        let bytes = payload.get(entry.byte_offset..end).ok_or_else(|| {
            bad(
                path,
                format!("tensor `{}` lies outside the payload", entry.name),
            )
        })?;
        let value = Tensor::from_f32_le_bytes(entry.shape.clone(), bytes)
            .map_err(|e| bad(path, e.to_string()))?;
        store
            .push(Param {
                name: entry.name.clone(),
                group: entry.group,
                value,
                frozen: entry.frozen,
            })
            .map_err(|e| bad(path, e.to_string()))?;
    }
    Model::from_parts(
        manifest.config,
        words,
        attributes,
        store,
        manifest.train_counts,
    )
    .map_err(|e| bad(path, e.to_string()))
}

/// Loads a checkpoint, rejecting it when its architecture differs from `config`.
pub fn load_expecting(path: &Path, config: &TrainConfig) -> Result<Model> {
    let model = load(path)?;
    if let Some(diff) = model.config.architecture_mismatch(config) {
        return Err(bad(path, format!("architecture mismatch: {diff}")));
    }
    Ok(model)
}
