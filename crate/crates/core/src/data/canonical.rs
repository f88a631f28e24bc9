//! Canonical digit glyphs and their scale/rotation augmentation.

use std::path::Path;

use super::image::Image;
use super::{DataError, ImageShape, LabeledDataset};

pub const CANVAS: usize = 28;

/// Load `root/<digit>/*.png` for digits 0-9 as white-on-black grayscale
/// glyphs. Files are taken in name order; all glyphs must share one square size.
pub fn load_glyph_dir(root: &Path) -> Result<LabeledDataset, DataError> {
    let mut size = None;
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for digit in 0..10u8 {
        let dir = root.join(digit.to_string());
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| DataError::io(&dir, e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x.eq_ignore_ascii_case("png")).unwrap_or(false))
            .collect();
        files.sort();
        for path in files {
            let img = Image::load_gray(&path)?;
            let expected = *size.get_or_insert(img.height);
            if img.height != img.width || img.height != expected {
                return Err(DataError::Shape(format!(
                    "{}: glyph is {}x{}, expected {expected}x{expected}",
                    path.display(),
                    img.height,
                    img.width
                )));
            }
            pixels.extend_from_slice(&img.data);
            labels.push(digit);
        }
    }
    let Some(size) = size else {
        return Err(DataError::Shape(format!("{}: no glyphs found", root.display())));
    };
    let ids = (0..labels.len() as u64).collect();
    let source = format!("glyphs:{}", root.display());
    LabeledDataset::new(ImageShape::new(size, size, 1), pixels, labels, ids, source)
}

/// Every base glyph at every scale and rotation. Each output is the glyph
/// resized to `scale x scale`, centred on a 28x28 black canvas and rotated
/// about the canvas centre. Output order is base-major, then scale, then
/// rotation; the id of an output encodes that position.
pub fn augment_canonical(
    base: &LabeledDataset,
    scales: &[usize],
    rotations: &[f64],
) -> Result<LabeledDataset, DataError> {
    let shape = base.shape();
    if shape.channels != 1 || shape.height != shape.width {
        return Err(DataError::Shape(format!("canonical glyphs must be square grayscale, got {shape:?}")));
    }
    if let Some(&scale) = scales.iter().find(|&&s| s == 0 || s > CANVAS) {
        return Err(DataError::ScaleTooLarge { scale, canvas: CANVAS });
    }
    if scales.is_empty() || rotations.is_empty() {
        return Err(DataError::Shape("augmentation needs at least one scale and one rotation".into()));
    }
    let per_base = (scales.len() * rotations.len()) as u64;
    let out_len = base.len() * scales.len() * rotations.len();
    let mut pixels = Vec::with_capacity(out_len * CANVAS * CANVAS);
    let mut labels = Vec::with_capacity(out_len);
    let mut ids = Vec::with_capacity(out_len);
    for i in 0..base.len() {
        let glyph = Image::new(shape.height, shape.width, 1, base.image(i).to_vec());
        for (si, &scale) in scales.iter().enumerate() {
            let placed = glyph.resize_bilinear(scale, scale).center_on(CANVAS, CANVAS, &[0.0]);
            for (ri, &angle) in rotations.iter().enumerate() {
                let mut out = placed.rotate(angle, 0.0);
                out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                pixels.extend_from_slice(&out.data);
                labels.push(base.label(i));
                ids.push(base.id(i) * per_base + (si * rotations.len() + ri) as u64);
            }
        }
    }
    let source = format!("canonical({}, scales={scales:?}, rotations={rotations:?})", base.source());
    LabeledDataset::new(ImageShape::new(CANVAS, CANVAS, 1), pixels, labels, ids, source)
}
