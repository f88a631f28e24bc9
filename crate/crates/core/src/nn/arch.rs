use serde::{Deserialize, Serialize};

use super::NnError;
use crate::data::{ImageShape, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    MnistCnn,
    CanonicalCnn,
    SvhnCnn,
}

impl ArchName {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::MnistCnn => "mnist_cnn",
            Self::CanonicalCnn => "canonical_cnn",
            Self::SvhnCnn => "svhn_cnn",
        }
    }
}

/// One layer. Convolutions and hidden dense layers are followed by a relu;
/// the last dense layer produces the logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool,
    Dense {
        units: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub name: ArchName,
    pub input: ImageShape,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    /// Two 5x5 convolution blocks and a hidden dense layer.
    pub fn mnist_cnn() -> Self {
        Self::two_block(ArchName::MnistCnn, [32, 64], 1024)
    }

    pub fn canonical_cnn() -> Self {
        Self::two_block(ArchName::CanonicalCnn, [32, 64], 1024)
    }

    /// `mnist_cnn`/`canonical_cnn` layout with custom widths.
    pub fn two_block(name: ArchName, channels: [usize; 2], hidden: usize) -> Self {
        let conv = |channels| LayerSpec::Conv { kernel: 5, channels, stride: 1, padding: 0 };
        Self {
            name,
            input: ImageShape::new(28, 28, 1),
            classes: NUM_CLASSES,
            layers: vec![
                conv(channels[0]),
                LayerSpec::MaxPool,
                conv(channels[1]),
                LayerSpec::MaxPool,
                LayerSpec::Dense { units: hidden },
                LayerSpec::Dense { units: NUM_CLASSES },
            ],
        }
    }

    /// Three blocks of two 3x3 convolutions on RGB input.
    pub fn svhn_cnn() -> Self {
        Self::three_block([32, 64, 128], 256)
    }

    pub fn three_block(channels: [usize; 3], hidden: usize) -> Self {
        let conv = |channels| LayerSpec::Conv { kernel: 3, channels, stride: 1, padding: 1 };
        let mut layers = Vec::new();
        for c in channels {
            layers.extend([conv(c), conv(c), LayerSpec::MaxPool]);
        }
        layers.push(LayerSpec::Dense { units: hidden });
        layers.push(LayerSpec::Dense { units: NUM_CLASSES });
        Self { name: ArchName::SvhnCnn, input: ImageShape::new(28, 28, 3), classes: NUM_CLASSES, layers }
    }

    pub fn by_name(name: &str) -> Result<Self, NnError> {
        match name {
            "mnist_cnn" => Ok(Self::mnist_cnn()),
            "canonical_cnn" => Ok(Self::canonical_cnn()),
            "svhn_cnn" => Ok(Self::svhn_cnn()),
            other => Err(NnError::InvalidArch(format!("unknown architecture `{other}`"))),
        }
    }

    /// Check the layer sequence against the family named by `name` and that
    /// every layer fits its input.
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::InvalidArch(format!("{}: {msg}", self.name.as_str())));
        let pattern: String = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { .. } => 'C',
                LayerSpec::MaxPool => 'P',
                LayerSpec::Dense { .. } => 'D',
            })
            .collect();
        let (expected, channels) = match self.name {
            ArchName::MnistCnn | ArchName::CanonicalCnn => ("CPCPDD", 1),
            ArchName::SvhnCnn => ("CCPCCPCCPDD", 3),
        };
        if pattern != expected {
            return bad(format!("layer pattern {pattern}, expected {expected}"));
        }
        if self.input.channels != channels || self.input.height == 0 || self.input.width == 0 {
            return bad(format!("input {:?} needs {channels} channel(s)", self.input));
        }
        if self.classes != NUM_CLASSES {
            return bad(format!("{} classes, expected {NUM_CLASSES}", self.classes));
        }
        if self.layers.last() != Some(&LayerSpec::Dense { units: self.classes }) {
            return bad("the last layer must be dense with one unit per class".into());
        }
        self.param_shapes().map(|_| ())
    }

    /// Weight and bias shape of every parametrised layer, in layer order.
    pub fn param_shapes(&self) -> Result<Vec<[Vec<usize>; 2]>, NnError> {
        let (mut h, mut w, mut c) = (self.input.height, self.input.width, self.input.channels);
        let mut flat: Option<usize> = None;
        let mut shapes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| NnError::InvalidArch(format!("layer {i}: {msg}"));
            match *layer {
                LayerSpec::Conv { kernel, channels, stride, padding } => {
                    if flat.is_some() {
                        return Err(err("convolution after a dense layer".into()));
                    }
                    if kernel == 0 || channels == 0 || stride == 0 {
                        return Err(err("kernel, channels and stride must be positive".into()));
                    }
                    if kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(err(format!("{kernel}x{kernel} kernel does not fit {h}x{w} input")));
                    }
                    shapes.push([vec![channels, kernel, kernel, c], vec![channels]]);
                    h = (h + 2 * padding - kernel) / stride + 1;
                    w = (w + 2 * padding - kernel) / stride + 1;
                    c = channels;
                }
                LayerSpec::MaxPool => {
                    if flat.is_some() || h < 2 || w < 2 {
                        return Err(err(format!("cannot pool a {h}x{w} map")));
                    }
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(err("dense layer needs at least one unit".into()));
                    }
                    let fan_in = flat.unwrap_or(h * w * c);
                    shapes.push([vec![units, fan_in], vec![units]]);
                    flat = Some(units);
                }
            }
        }
        Ok(shapes)
    }

    pub fn parameter_count(&self) -> Result<usize, NnError> {
        Ok(self.param_shapes()?.iter().flatten().map(|s| s.iter().product::<usize>()).sum())
    }
}
