//! The in-memory image type shared by every pipeline stage.
//!
//! Images are stored channels-first (`[3, H, W]`) as `f64` in `[0, 1]`.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};

/// Rec. 601 luma coefficients, also used for grayscale statistics.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An RGB image, channels-first, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wraps a `[3, H, W]` array. Values must be finite and in `[0, 1]`.
    pub fn from_chw(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 channels, got {}",
                data.shape()[0]
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument(
                "image values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self { data })
    }

    /// Wraps without the range check, clamping into `[0, 1]`.
    pub fn from_chw_clamped(mut data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 channels, got {}",
                data.shape()[0]
            )));
        }
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_chw(Array3::from_elem((3, height, width), value))
    }

    /// Fills an image with uniform random values from `rng`.
    pub fn random(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let data = Array3::from_shape_fn((3, height, width), |_| rng.random_range(0.0..=1.0));
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[[channel, y, x]]
    }

    pub fn set(&mut self, channel: usize, y: usize, x: usize, value: f64) {
        self.data[[channel, y, x]] = value.clamp(0.0, 1.0);
    }

    /// Applies `f` per pixel value, clamping the result to `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.mapv(|v| f(v).clamp(0.0, 1.0)),
        }
    }

    /// Luminance plane (Rec. 601), shape `[H, W]`.
    pub fn luminance(&self) -> Array2<f64> {
        let (h, w) = (self.height(), self.width());
        Array2::from_shape_fn((h, w), |(y, x)| {
            LUMA_WEIGHTS[0] * self.data[[0, y, x]]
                + LUMA_WEIGHTS[1] * self.data[[1, y, x]]
                + LUMA_WEIGHTS[2] * self.data[[2, y, x]]
        })
    }

    /// Population standard deviation of the luminance plane.
    pub fn luminance_std(&self) -> f64 {
        let lum = self.luminance();
        let n = lum.len() as f64;
        let mean = lum.sum() / n;
        (lum.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.sum() / self.data.len() as f64
    }

    pub fn channel_mean(&self, channel: usize) -> f64 {
        let plane = self.data.index_axis(ndarray::Axis(0), channel);
        plane.sum() / plane.len() as f64
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px[c] as f64 / 255.0;
            }
        }
        Self { data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (self.data[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<Self> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rejects_out_of_range_values() {
        let data = Array3::from_elem((3, 2, 2), 1.5);
        assert!(ImageTensor::from_chw(data).is_err());
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let data = Array3::zeros((4, 2, 2));
        assert!(ImageTensor::from_chw(data).is_err());
    }

    #[test]
    fn luminance_of_gray_is_gray() {
        let img = ImageTensor::constant(4, 4, 0.5).unwrap();
        let lum = img.luminance();
        for v in lum.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rgb8_round_trip_is_close() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        use rand::SeedableRng;
        let img = ImageTensor::random(5, 7, &mut rng);
        let back = ImageTensor::from_rgb8(&img.to_rgb8());
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
