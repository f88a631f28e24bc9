//! Minimal float image with the geometric operations the pipelines need.

use std::path::Path;

use super::DataError;

/// HWC image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(height * width * channels, data.len(), "image buffer size");
        Self { height, width, channels, data }
    }

    pub fn filled(height: usize, width: usize, fill: &[f32]) -> Self {
        let data = fill.iter().copied().cycle().take(height * width * fill.len()).collect();
        Self::new(height, width, fill.len(), data)
    }

    pub fn load_rgb(path: &Path) -> Result<Self, DataError> {
        let img = image::open(path).map_err(|e| DataError::image(path, e))?.into_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self::new(h as usize, w as usize, 3, img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect()))
    }

    pub fn load_gray(path: &Path) -> Result<Self, DataError> {
        let img = image::open(path).map_err(|e| DataError::image(path, e))?.into_luma8();
        let (w, h) = img.dimensions();
        Ok(Self::new(h as usize, w as usize, 1, img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DataError> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(DataError::Shape(format!("cannot save a {c}-channel image as png"))),
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| DataError::image(path, e))
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Self {
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for row in y..y + h {
            let start = (row * self.width + x) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Self::new(h, w, c, data)
    }

    /// Per-channel mean of the one-pixel outer ring.
    pub fn border_mean(&self) -> Vec<f32> {
        let mut sums = vec![0.0f64; self.channels];
        let mut count = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if y == 0 || x == 0 || y + 1 == self.height || x + 1 == self.width {
                    for (c, s) in sums.iter_mut().enumerate() {
                        *s += self.get(y, x, c) as f64;
                    }
                    count += 1;
                }
            }
        }
        sums.into_iter().map(|s| (s / count as f64) as f32).collect()
    }

    /// Bilinear resize with pixel centres aligned; edge pixels are clamped.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                for c in 0..self.channels {
                    data.push(self.sample(src_y, src_x, c, 0.0));
                }
            }
        }
        Self::new(height, width, self.channels, data)
    }

    /// Bilinear sample; neighbours outside the image take the value `fill`.
    fn sample(&self, y: f64, x: f64, c: usize, fill: f32) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let at = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                fill as f64
            } else {
                self.get(yy as usize, xx as usize, c) as f64
            }
        };
        let mut v = at(y0, x0) * (1.0 - fy) * (1.0 - fx);
        if fx > 0.0 {
            v += at(y0, x0 + 1.0) * (1.0 - fy) * fx;
        }
        if fy > 0.0 {
            v += at(y0 + 1.0, x0) * fy * (1.0 - fx);
            if fx > 0.0 {
                v += at(y0 + 1.0, x0 + 1.0) * fy * fx;
            }
        }
        v as f32
    }

    /// Rotate about the image centre by `degrees` (counter-clockwise as
    /// displayed), sampling bilinearly and filling uncovered area with `fill`.
    pub fn rotate(&self, degrees: f64, fill: f32) -> Self {
        if degrees == 0.0 {
            return self.clone();
        }
        let (sin, cos) = degrees.to_radians().sin_cos();
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            let dy = y as f64 - cy;
            for x in 0..self.width {
                let dx = x as f64 - cx;
                let src_x = cx + cos * dx - sin * dy;
                let src_y = cy + sin * dx + cos * dy;
                for c in 0..self.channels {
                    let inside =
                        src_y > -1.0 && src_x > -1.0 && src_y < self.height as f64 && src_x < self.width as f64;
                    data.push(if inside { self.sample(src_y, src_x, c, fill) } else { fill });
                }
            }
        }
        Self::new(self.height, self.width, self.channels, data)
    }

    /// Place this image at the centre of a `height x width` canvas filled
    /// with `fill`. Odd leftovers go to the bottom/right.
    pub fn center_on(&self, height: usize, width: usize, fill: &[f32]) -> Self {
        assert!(self.height <= height && self.width <= width, "image larger than canvas");
        let mut canvas = Self::filled(height, width, fill);
        let (top, left) = ((height - self.height) / 2, (width - self.width) / 2);
        let c = self.channels;
        for y in 0..self.height {
            let dst = ((top + y) * width + left) * c;
            let src = y * self.width * c;
            canvas.data[dst..dst + self.width * c].copy_from_slice(&self.data[src..src + self.width * c]);
        }
        canvas
    }
}
