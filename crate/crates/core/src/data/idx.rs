//! Big-endian IDX arrays as used by the MNIST distribution.

use std::path::Path;

use super::{DataError, ImageShape, LabeledDataset};

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "idx dims do not match data");
        Self { dims, data: IdxData::U8(data) }
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "idx dims do not match data");
        Self { dims, data: IdxData::F32(data) }
    }

    pub fn parse(bytes: &[u8], origin: &str) -> Result<Self, DataError> {
        let truncated = || DataError::Truncated { path: origin.to_string() };
        if bytes.len() < 4 {
            return Err(truncated());
        }
        let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
        let (zero, ty, rank) = (bytes[0] as u16 * 256 + bytes[1] as u16, bytes[2], bytes[3] as usize);
        if zero != 0 || !(ty == TYPE_U8 || ty == TYPE_F32) || rank == 0 {
            return Err(DataError::BadMagic { path: origin.to_string(), found: magic });
        }
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(truncated());
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let width = if ty == TYPE_U8 { 1 } else { 4 };
        let body = &bytes[header..];
        if body.len() < count * width {
            return Err(truncated());
        }
        if body.len() > count * width {
            return Err(DataError::Shape(format!("{origin}: {} trailing bytes", body.len() - count * width)));
        }
        let data = if ty == TYPE_U8 {
            IdxData::U8(body.to_vec())
        } else {
            IdxData::F32(body.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes"))).collect())
        };
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&bytes, &path.display().to_string())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ty = match self.data {
            IdxData::U8(_) => TYPE_U8,
            IdxData::F32(_) => TYPE_F32,
        };
        let mut out = vec![0, 0, ty, self.dims.len() as u8];
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        match &self.data {
            IdxData::U8(v) => out.extend_from_slice(v),
            IdxData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DataError::io(path, e))
    }
}

/// Load an image file (`[n, rows, cols]` or `[n, rows, cols, channels]`, u8
/// or f32) and a label file (`[n]`, u8) into a dataset with ids `0..n`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset, DataError> {
    let img = IdxArray::read(images)?;
    let lab = IdxArray::read(labels)?;
    let shape = match img.dims[..] {
        [_, h, w] => ImageShape::new(h, w, 1),
        [_, h, w, c] => ImageShape::new(h, w, c),
        _ => return Err(DataError::Shape(format!("{}: image array has dims {:?}", images.display(), img.dims))),
    };
    let IdxData::U8(label_bytes) = lab.data else {
        return Err(DataError::Shape(format!("{}: labels must be unsigned bytes", labels.display())));
    };
    if lab.dims.len() != 1 {
        return Err(DataError::Shape(format!("{}: label array has dims {:?}", labels.display(), lab.dims)));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(DataError::CountMismatch { images: img.dims[0], labels: lab.dims[0] });
    }
    let pixels = match img.data {
        IdxData::U8(v) => v.into_iter().map(|b| b as f32 / 255.0).collect(),
        IdxData::F32(v) => v,
    };
    let ids = (0..label_bytes.len() as u64).collect();
    let source = format!("idx:{}", images.file_name().map(|n| n.to_string_lossy()).unwrap_or_default());
    LabeledDataset::new(shape, pixels, label_bytes, ids, source)
}

/// Write images as a float IDX array and labels as a u8 IDX array.
pub fn save_idx_f32(dataset: &LabeledDataset, images: &Path, labels: &Path) -> Result<(), DataError> {
    let s = dataset.shape();
    let dims = if s.channels == 1 {
        vec![dataset.len(), s.height, s.width]
    } else {
        vec![dataset.len(), s.height, s.width, s.channels]
    };
    IdxArray::f32(dims, dataset.pixels().to_vec()).write(images)?;
    IdxArray::u8(vec![dataset.len()], dataset.labels().to_vec()).write(labels)
}
