//! Bounding-box crops of street-number photographs to 28x28 digits.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::{DataError, ImageShape, LabeledDataset};

pub const CANVAS: usize = 28;
/// Boxes with a side shorter than this are discarded.
pub const MIN_SIDE: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxEntry {
    /// Source image, relative to the manifest's directory.
    pub src: PathBuf,
    pub label: u8,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub kept: usize,
    pub discarded: usize,
}

/// `round(num / den)` with halves rounded up, in exact integer arithmetic.
fn round_half_up(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// Crop, scale the longer side to 28 and pad the shorter side to 28 with the
/// mean colour of the crop's border. Returns `None` for boxes too small to use.
pub fn preprocess_box(source: &Image, b: &BoxEntry) -> Result<Option<Image>, DataError> {
    if b.w == 0 || b.h == 0 || b.x + b.w > source.width || b.y + b.h > source.height {
        return Err(DataError::BoxOutOfBounds {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
            width: source.width,
            height: source.height,
        });
    }
    if b.w.min(b.h) < MIN_SIDE {
        return Ok(None);
    }
    let crop = source.crop(b.x, b.y, b.w, b.h);
    let fill = crop.border_mean();
    let (h, w) = if b.h >= b.w {
        (CANVAS, round_half_up(b.w * CANVAS, b.h).max(1))
    } else {
        (round_half_up(b.h * CANVAS, b.w).max(1), CANVAS)
    };
    let mut scaled = crop.resize_bilinear(h, w);
    scaled.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Some(scaled.center_on(CANVAS, CANVAS, &fill)))
}

pub fn load_box_manifest(path: &Path) -> Result<Vec<BoxEntry>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let entries: Vec<BoxEntry> =
        serde_json::from_str(&text).map_err(|e| DataError::Json { path: path.display().to_string(), source: e })?;
    if let Some((index, e)) = entries.iter().enumerate().find(|(_, e)| e.label > 9) {
        return Err(DataError::LabelOutOfRange { index, label: e.label as u32 });
    }
    Ok(entries)
}

/// Preprocess every box of a manifest into an RGB dataset. The id of each
/// kept example is its position in the manifest.
pub fn preprocess_manifest(path: &Path) -> Result<(LabeledDataset, PreprocessReport), DataError> {
    let entries = load_box_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut report = PreprocessReport::default();
    let (mut pixels, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    let mut current: Option<(PathBuf, Image)> = None;
    for (i, entry) in entries.iter().enumerate() {
        let src = base.join(&entry.src);
        if current.as_ref().map(|(p, _)| p != &src).unwrap_or(true) {
            current = Some((src.clone(), Image::load_rgb(&src)?));
        }
        let image = &current.as_ref().expect("loaded").1;
        match preprocess_box(image, entry)? {
            Some(img) => {
                pixels.extend_from_slice(&img.data);
                labels.push(entry.label);
                ids.push(i as u64);
                report.kept += 1;
            }
            None => report.discarded += 1,
        }
    }
    let source = format!("boxes:{}", path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default());
    let dataset = LabeledDataset::new(ImageShape::new(CANVAS, CANVAS, 3), pixels, labels, ids, source)?;
    Ok((dataset, report))
}
