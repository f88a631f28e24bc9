//! Attack results on disk: `adversarial.idx` and `original.idx` hold the
//! images as float IDX arrays, `index.json` everything else.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{l2_distance, AttackError, AttackResult, AttackSpec, TargetPolicy};
use crate::data::{IdxArray, IdxData, ImageShape, LabeledDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: u64,
    pub true_label: u8,
    pub target: Option<u8>,
    pub spec: AttackSpec,
    pub success: bool,
    pub predicted: u8,
    pub l2_distortion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackIndex {
    pub model_sha256: String,
    pub dataset_sha256: String,
    pub shape: ImageShape,
    pub policy: TargetPolicy,
    pub entries: Vec<IndexEntry>,
}

fn image_dims(n: usize, s: ImageShape) -> Vec<usize> {
    vec![n, s.height, s.width, s.channels]
}

/// Write `results` together with the images they were computed from.
pub fn save_results(
    dir: &Path,
    results: &[AttackResult],
    data: &LabeledDataset,
    model_sha256: &str,
    policy: TargetPolicy,
) -> Result<AttackIndex, AttackError> {
    std::fs::create_dir_all(dir).map_err(|e| AttackError::Io { path: dir.display().to_string(), source: e })?;
    let position: HashMap<u64, usize> = data.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let shape = data.shape();
    let mut adversarial = Vec::with_capacity(results.len() * shape.len());
    let mut original = Vec::with_capacity(results.len() * shape.len());
    for r in results {
        let i = *position.get(&r.id).ok_or(crate::data::DataError::UnknownId(r.id))?;
        if r.adversarial.len() != shape.len() {
            return Err(AttackError::Shape { expected: shape.len(), found: r.adversarial.len() });
        }
        adversarial.extend_from_slice(&r.adversarial);
        original.extend_from_slice(data.image(i));
    }
    IdxArray::f32(image_dims(results.len(), shape), adversarial).write(&dir.join("adversarial.idx"))?;
    IdxArray::f32(image_dims(results.len(), shape), original).write(&dir.join("original.idx"))?;
    let index = AttackIndex {
        model_sha256: model_sha256.to_string(),
        dataset_sha256: data.sha256().to_string(),
        shape,
        policy,
        entries: results
            .iter()
            .map(|r| IndexEntry {
                id: r.id,
                true_label: r.true_label,
                target: r.target,
                spec: r.spec,
                success: r.success,
                predicted: r.predicted,
                l2_distortion: r.l2_distortion,
            })
            .collect(),
    };
    let path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&path, json).map_err(|e| AttackError::Io { path: path.display().to_string(), source: e })?;
    Ok(index)
}

/// Stored attack results and, per result, the original image.
#[derive(Clone, Debug)]
pub struct StoredAttack {
    pub index: AttackIndex,
    pub results: Vec<AttackResult>,
    pub originals: Vec<Vec<f32>>,
}

impl StoredAttack {
    /// The adversarial images as a dataset labelled with their true classes.
    /// Ids are result positions.
    pub fn adversarial_dataset(&self) -> Result<LabeledDataset, AttackError> {
        let pixels = self.results.iter().flat_map(|r| r.adversarial.iter().copied()).collect();
        let labels = self.results.iter().map(|r| r.true_label).collect();
        let ids = (0..self.results.len() as u64).collect();
        Ok(LabeledDataset::new(self.index.shape, pixels, labels, ids, "adversarial")?)
    }
}

pub fn load_results(dir: &Path) -> Result<StoredAttack, AttackError> {
    let path = dir.join("index.json");
    let text =
        std::fs::read_to_string(&path).map_err(|e| AttackError::Io { path: path.display().to_string(), source: e })?;
    let index: AttackIndex =
        serde_json::from_str(&text).map_err(|e| AttackError::Json { path: path.display().to_string(), source: e })?;
    let read = |name: &str| -> Result<Vec<f32>, AttackError> {
        let arr = IdxArray::read(&dir.join(name))?;
        let expected = image_dims(index.entries.len(), index.shape);
        match arr.data {
            IdxData::F32(v) if arr.dims == expected => Ok(v),
            _ => Err(AttackError::Shape { expected: expected.iter().product(), found: arr.dims.iter().product() }),
        }
    };
    let adversarial = read("adversarial.idx")?;
    let original = read("original.idx")?;
    let n = index.shape.len();
    let mut results = Vec::with_capacity(index.entries.len());
    let mut originals = Vec::with_capacity(index.entries.len());
    for (i, e) in index.entries.iter().enumerate() {
        results.push(AttackResult {
            id: e.id,
            true_label: e.true_label,
            target: e.target,
            spec: e.spec,
            adversarial: adversarial[i * n..(i + 1) * n].to_vec(),
            success: e.success,
            predicted: e.predicted,
            l2_distortion: e.l2_distortion,
        });
        originals.push(original[i * n..(i + 1) * n].to_vec());
    }
    Ok(StoredAttack { index, results, originals })
}

/// Recompute each distortion from the stored images; returns the largest
/// absolute disagreement with the recorded values.
pub fn distortion_drift(stored: &StoredAttack) -> f64 {
    stored
        .results
        .iter()
        .zip(&stored.originals)
        .map(|(r, o)| (l2_distance(&r.adversarial, o) - r.l2_distortion).abs())
        .fold(0.0, f64::max)
}
