//! Training-time random resized crop and horizontal flip; inference resize.

use rand::Rng;

use crate::image::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the source area.
    pub min_area: f64,
    pub max_area: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_area: 0.8,
            max_area: 1.0,
            flip_prob: 0.5,
        }
    }
}

/// A fully pinned augmentation: square crop of `side` pixels at
/// `(top, left)`, optional mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub flip: bool,
}

impl CropParams {
    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let short = height.min(width);
        let area = rng.random_range(cfg.min_area..=cfg.max_area);
        let side = ((area * (height * width) as f64).sqrt().round() as usize).clamp(1, short);
        let top = rng.random_range(0..=height - side);
        let left = rng.random_range(0..=width - side);
        let flip = rng.random::<f64>() < cfg.flip_prob;
        CropParams {
            top,
            left,
            side,
            flip,
        }
    }

    pub fn apply(&self, img: &ImageTensor, out_size: usize) -> ImageTensor {
        let cropped = img
            .crop(self.top, self.left, self.side, self.side)
            .expect("crop params sampled inside the image");
        let resized = cropped.resize(out_size, out_size);
        if self.flip {
            resized.flip_horizontal()
        } else {
            resized
        }
    }
}

pub fn augment(
    img: &ImageTensor,
    out_size: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> ImageTensor {
    CropParams::sample(cfg, img.height, img.width, rng).apply(img, out_size)
}

/// Inference path: plain resize, no randomness.
pub fn preprocess(img: &ImageTensor, out_size: usize) -> ImageTensor {
    img.resize(out_size, out_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(
            h,
            w,
            1,
            (0..h * w).map(|i| i as f32 / (h * w) as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn inference_resize_hits_configured_size() {
        let out = preprocess(&ramp(100, 100), 364);
        assert_eq!((out.height, out.width), (364, 364));
    }

    #[test]
    fn full_centered_crop_equals_resize() {
        let img = ramp(20, 20);
        let p = CropParams {
            top: 0,
            left: 0,
            side: 20,
            flip: false,
        };
        assert_eq!(p.apply(&img, 14), preprocess(&img, 14));
    }

    #[test]
    fn sampled_crops_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = rng_for(1, "augment");
        for _ in 0..200 {
            let p = CropParams::sample(&cfg, 56, 56, &mut rng);
            let frac = (p.side * p.side) as f64 / (56.0 * 56.0);
            assert!((0.78..=1.0).contains(&frac), "{frac}");
            assert!(p.top + p.side <= 56 && p.left + p.side <= 56);
        }
    }
}
