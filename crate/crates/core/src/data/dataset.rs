use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;

pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where a dataset came from and exactly which examples, in which order, it holds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub ids: Vec<u64>,
    pub sha256: String,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Json { path: path.display().to_string(), source: e })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| DataError::io(path, e))
    }
}

/// Ordered (image, label) pairs. Images are stored HWC with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    shape: ImageShape,
    pixels: Vec<f32>,
    labels: Vec<u8>,
    manifest: DatasetManifest,
}

impl LabeledDataset {
    pub fn new(
        shape: ImageShape,
        pixels: Vec<f32>,
        labels: Vec<u8>,
        ids: Vec<u64>,
        source: impl Into<String>,
    ) -> Result<Self, DataError> {
        if shape.is_empty() {
            return Err(DataError::Shape(format!("degenerate image shape {shape:?}")));
        }
        if pixels.len() != labels.len() * shape.len() {
            return Err(DataError::Shape(format!(
                "{} pixel values for {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if ids.len() != labels.len() {
            return Err(DataError::Shape(format!("{} ids for {} labels", ids.len(), labels.len())));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
            return Err(DataError::LabelOutOfRange { index, label: label as u32 });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        let sha256 = content_hash(shape, &pixels, &labels, &ids);
        Ok(Self { shape, pixels, labels, manifest: DatasetManifest { source: source.into(), ids, sha256 } })
    }

    pub fn empty(shape: ImageShape, source: impl Into<String>) -> Self {
        Self::new(shape, Vec::new(), Vec::new(), Vec::new(), source).expect("empty dataset is valid")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn id(&self, i: usize) -> u64 {
        self.manifest.ids[i]
    }

    pub fn ids(&self) -> &[u64] {
        &self.manifest.ids
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn sha256(&self) -> &str {
        &self.manifest.sha256
    }

    pub fn source(&self) -> &str {
        &self.manifest.source
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], source: impl Into<String>) -> Self {
        let n = self.shape.len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
            ids.push(self.manifest.ids[i]);
        }
        let sha256 = content_hash(self.shape, &pixels, &labels, &ids);
        Self { shape: self.shape, pixels, labels, manifest: DatasetManifest { source: source.into(), ids, sha256 } }
    }

    /// Examples whose ids appear in `ids`, in the order given.
    pub fn select_ids(&self, ids: &[u64], source: impl Into<String>) -> Result<Self, DataError> {
        let index: HashMap<u64, usize> = self.manifest.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let indices = ids
            .iter()
            .map(|id| index.get(id).copied().ok_or(DataError::UnknownId(*id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.subset(&indices, source))
    }

    /// Rebuild the dataset described by `manifest` from this one and check
    /// that the content hash matches.
    pub fn restrict_to(&self, manifest: &DatasetManifest) -> Result<Self, DataError> {
        let subset = self.select_ids(&manifest.ids, manifest.source.clone())?;
        if subset.sha256() != manifest.sha256 {
            return Err(DataError::HashMismatch {
                expected: manifest.sha256.clone(),
                found: subset.sha256().to_string(),
            });
        }
        Ok(subset)
    }

    /// Concatenate `other` after `self`.
    pub fn concat(&self, other: &Self, source: impl Into<String>) -> Result<Self, DataError> {
        if self.shape != other.shape {
            return Err(DataError::Shape(format!("cannot concatenate {:?} with {:?}", self.shape, other.shape)));
        }
        let mut pixels = self.pixels.clone();
        pixels.extend_from_slice(&other.pixels);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.manifest.ids.clone();
        ids.extend_from_slice(&other.manifest.ids);
        Self::new(self.shape, pixels, labels, ids, source)
    }

    /// The same examples ordered by ascending id.
    pub fn sorted_by_id(&self) -> Self {
        let mut indices: Vec<usize> = (0..self.len()).collect();
        indices.sort_by_key(|&i| self.manifest.ids[i]);
        self.subset(&indices, self.manifest.source.clone())
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Seeded random partition into two parts; `part_a` holds
    /// `round(fraction * len)` examples. Both parts keep the original order.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self), DataError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(DataError::InvalidFraction(fraction));
        }
        let n = self.len();
        let size_a = (fraction * n as f64).round() as usize;
        if size_a == 0 || size_a == n {
            return Err(DataError::DegenerateSplit { len: n, fraction });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        let (a, b) = order.split_at_mut(size_a);
        a.sort_unstable();
        b.sort_unstable();
        let source = &self.manifest.source;
        Ok((
            self.subset(a, format!("split({source}, {fraction}, seed={seed}).a")),
            self.subset(b, format!("split({source}, {fraction}, seed={seed}).b")),
        ))
    }
}

fn content_hash(shape: ImageShape, pixels: &[f32], labels: &[u8], ids: &[u64]) -> String {
    let mut h = Sha256::new();
    for d in [shape.height, shape.width, shape.channels] {
        h.update((d as u32).to_le_bytes());
    }
    let n = shape.len();
    let mut buf = Vec::with_capacity(n * 4);
    for (i, (&label, &id)) in labels.iter().zip(ids).enumerate() {
        h.update(id.to_le_bytes());
        h.update([label]);
        buf.clear();
        for v in &pixels[i * n..(i + 1) * n] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        h.update(&buf);
    }
    hex::encode(h.finalize())
}
