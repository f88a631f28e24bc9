//! Datasets, IDX files and image preprocessing.

mod boxes;
mod canonical;
mod dataset;
mod idx;
mod image;

use std::path::Path;

pub use boxes::{load_box_manifest, preprocess_box, preprocess_manifest, BoxEntry, PreprocessReport};
pub use canonical::{augment_canonical, load_glyph_dir};
pub use dataset::{DatasetManifest, ImageShape, LabeledDataset, NUM_CLASSES};
pub use idx::{load_idx, save_idx_f32, IdxArray, IdxData};
pub use image::Image;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: String, source: ::image::ImageError },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: unrecognised idx magic number {found:#010x}")]
    BadMagic { path: String, found: u32 },
    #[error("{path}: file is truncated")]
    Truncated { path: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("example {index} has label {label}, expected 0-9")]
    LabelOutOfRange { index: usize, label: u32 },
    #[error("box x={x} y={y} w={w} h={h} does not fit a {width}x{height} image")]
    BoxOutOfBounds { x: usize, y: usize, w: usize, h: usize, width: usize, height: usize },
    #[error("scale {scale} does not fit the {canvas}x{canvas} canvas")]
    ScaleTooLarge { scale: usize, canvas: usize },
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("splitting {len} examples at {fraction} leaves an empty part")]
    DegenerateSplit { len: usize, fraction: f64 },
    #[error("no example with id {0}")]
    UnknownId(u64),
    #[error("dataset hash {found} does not match manifest hash {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("{0}")]
    Shape(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn image(path: &Path, source: ::image::ImageError) -> Self {
        Self::Image { path: path.display().to_string(), source }
    }
}
