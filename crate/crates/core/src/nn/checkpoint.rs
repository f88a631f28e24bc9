//! Binary checkpoint format:
//!
//! ```text
//! "SANI" | version u32 | header length u32 | header JSON {arch, meta}
//!        | per layer: weights f32..., bias f32... | checksum u64
//! ```
//!
//! Integers and floats are little-endian. The checksum is the first eight
//! bytes of the SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::Model;
use super::train::TrainConfig;
use super::{ArchDescriptor, NnError};
use crate::autodiff::Tensor;
use crate::data::LabeledDataset;

const MAGIC: &[u8; 4] = b"SANI";
pub const FORMAT_VERSION: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub epochs_run: usize,
    pub train_examples: usize,
    pub train_dataset_sha256: String,
    pub train_dataset_source: String,
    pub epoch_losses: Vec<f64>,
    /// Mean batch loss over each tenth of the first epoch.
    pub first_epoch_loss_curve: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub test_dataset_sha256: Option<String>,
    /// Free-form provenance supplied by the caller, e.g. a config hash.
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
}

impl TrainingMeta {
    pub(crate) fn new(config: &TrainConfig, data: &LabeledDataset) -> Self {
        Self {
            config: config.clone(),
            epochs_run: 0,
            train_examples: data.len(),
            train_dataset_sha256: data.sha256().to_string(),
            train_dataset_source: data.source().to_string(),
            epoch_losses: Vec::new(),
            first_epoch_loss_curve: Vec::new(),
            train_accuracy: 0.0,
            test_accuracy: None,
            test_dataset_sha256: None,
            annotations: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchDescriptor,
    meta: TrainingMeta,
}

/// Trained parameters with the architecture and training record needed to
/// rebuild and audit the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub params: Vec<Tensor>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(model: &Model, meta: TrainingMeta) -> Self {
        Self { arch: model.arch().clone(), params: model.params().to_vec(), meta }
    }

    pub fn model(&self) -> Result<Model, NnError> {
        Model::from_params(self.arch.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header { arch: self.arch.clone(), meta: self.meta.clone() })
            .expect("checkpoint header serializes");
        let floats: usize = self.params.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(12 + header.len() + 4 * floats + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(NnError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(NnError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(NnError::UnsupportedVersion { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12 + header_len;
        if bytes.len() < header_end + 8 {
            return Err(NnError::Truncated);
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..header_end]).map_err(|e| NnError::CorruptHeader(e.to_string()))?;
        let shapes: Vec<Vec<usize>> = header.arch.param_shapes()?.into_iter().flatten().collect();
        let floats: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let body_end = header_end + 4 * floats;
        if bytes.len() < body_end + 8 {
            return Err(NnError::Truncated);
        }
        if bytes.len() > body_end + 8 {
            return Err(NnError::CorruptHeader(format!("{} unexpected trailing bytes", bytes.len() - body_end - 8)));
        }
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        if stored != checksum(&bytes[..body_end]) {
            return Err(NnError::ChecksumMismatch);
        }
        let mut offset = header_end;
        let mut params = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let len: usize = shape.iter().product();
            let data = bytes[offset..offset + 4 * len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * len;
            params.push(Tensor::new(shape, data)?.with_grad(true));
        }
        Ok(Self { arch: header.arch, params, meta: header.meta })
    }

    /// Write to a sibling temporary file and rename it into place, so a
    /// failed save never leaves a partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let io = |e| NnError::Io { path: path.display().to_string(), source: e };
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|e| NnError::Io { path: path.display().to_string(), source: e })?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
