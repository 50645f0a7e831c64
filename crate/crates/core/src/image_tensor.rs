use std::path::Path;

use crate::error::{PgdsError, Result};
use crate::nn::Tensor4;

/// An RGB image stored row-major as H x W x 3 with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
            return Err(PgdsError::domain(format!(
                "image size {height}x{width} is not a positive multiple of 32"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(PgdsError::domain(format!(
                "expected {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(PgdsError::domain("pixel values must be finite and within [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Writes a pixel, clamping into [0, 1].
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[o + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Round-trips the values through 8-bit quantisation, as a PNG save/load would.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| PgdsError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(PgdsError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
            ));
        }
        let img = image::open(path)
            .map_err(|e| PgdsError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    /// Packs images into an NCHW batch.
    pub fn batch(images: &[&ImageTensor]) -> Result<Tensor4> {
        let first = images
            .first()
            .ok_or_else(|| PgdsError::domain("empty image batch"))?;
        let (h, w) = (first.height, first.width);
        let mut t = Tensor4::zeros(images.len(), 3, h, w);
        for (i, img) in images.iter().enumerate() {
            if img.height != h || img.width != w {
                return Err(PgdsError::domain("images in a batch must share a size"));
            }
            let dst = t.image_mut(i);
            for p in 0..h * w {
                for c in 0..3 {
                    dst[c * h * w + p] = img.data[p * 3 + c];
                }
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_sizes_and_values() {
        assert!(ImageTensor::filled(90, 32, [0.5; 3]).is_err());
        assert!(ImageTensor::new(32, 32, vec![1.5; 32 * 32 * 3]).is_err());
        assert!(ImageTensor::new(32, 32, vec![0.5; 10]).is_err());
    }

    #[test]
    fn png_round_trip_is_lossless_after_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..64 * 32 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = ImageTensor::new(64, 32, data).unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn batch_layout_is_channel_major() {
        let mut img = ImageTensor::filled(32, 32, [0.0; 3]).unwrap();
        img.set_pixel(1, 2, [0.1, 0.2, 0.3]);
        let t = ImageTensor::batch(&[&img]).unwrap();
        assert_eq!(t.data[32 + 2], 0.1);
        assert_eq!(t.data[32 * 32 + 32 + 2], 0.2);
        assert_eq!(t.data[2 * 32 * 32 + 32 + 2], 0.3);
    }
}
