use crate::error::{Error, Result};

/// Pixel grid with values in `[0, 1]`, stored row-major as `(y, x, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Preprocess(format!(
                "invalid image geometry {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Preprocess(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let w = self.width;
        let ch = self.channels;
        self.pixels[(y * w + x) * ch + c] = v;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Preprocess(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = ImageTensor::zeros(height, width, self.channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(top + y, left + x, c));
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = ImageTensor::zeros(height, width, self.channels);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let coord = |dst: usize, scale: f64, limit: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(limit - 1);
            (lo, hi, (src - lo as f64) as f32)
        };
        for y in 0..height {
            let (y0, y1, fy) = coord(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, sx, self.width);
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    out.set(y, x, c, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let pixels = (0..h * w).map(|i| i as f32 / (h * w) as f32).collect();
        ImageTensor::new(h, w, 1, pixels).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(5, 7);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_ne!(img.flip_horizontal(), img);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = ramp(6, 6);
        assert_eq!(img.resize(6, 6), img);
        let up = img.resize(12, 9);
        assert_eq!((up.height, up.width), (12, 9));
    }

    #[test]
    fn constant_image_stays_constant_under_resize() {
        let img = ImageTensor::new(4, 4, 1, vec![0.25; 16]).unwrap();
        assert!(img
            .resize(9, 13)
            .pixels
            .iter()
            .all(|&p| (p - 0.25).abs() < 1e-7));
    }

    #[test]
    fn full_crop_is_identity() {
        let img = ramp(8, 8);
        assert_eq!(img.crop(0, 0, 8, 8).unwrap(), img);
        assert!(img.crop(1, 0, 8, 8).is_err());
    }
}
