use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transform::{flip_horizontal, gaussian_blur, random_crop, resize_bilinear, rotate90};
use super::ImageRGB8;
use crate::error::{Error, Result};

/// Training-time augmentation: axis rotation, horizontal flip, square crop
/// resized to `output_size`, optional Gaussian blur.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Allowed rotations in degrees, a non-empty subset of {0, 90, 180, 270}.
    pub rotations: Vec<u32>,
    pub flip_prob: f64,
    /// Crop side as a fraction of the shorter image side.
    pub crop_scale: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    /// `(width, height)` after cropping.
    pub output_size: (u32, u32),
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            rotations: vec![0, 90, 180, 270],
            flip_prob: 0.5,
            crop_scale: (0.8, 1.0),
            blur_prob: 0.3,
            blur_sigma: (0.5, 1.5),
            output_size: (224, 224),
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.rotations.is_empty() || self.rotations.iter().any(|r| ![0, 90, 180, 270].contains(r)) {
            return bad(format!(
                "rotations must be a non-empty subset of 0/90/180/270, got {:?}",
                self.rotations
            ));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got {:?}", self.crop_scale));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return bad(format!("blur_sigma must satisfy 0 < lo <= hi, got {:?}", self.blur_sigma));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return bad("output_size must be positive".into());
        }
        Ok(())
    }

    /// Generator for one draw; stream `draw_index` of the policy seed.
    fn rng(&self, draw_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(draw_index);
        rng
    }
}

/// rotate → flip → crop → resize → blur, with every random choice derived
/// from `(policy.seed, draw_index)`.
pub fn augment(img: &ImageRGB8, policy: &AugmentationPolicy, draw_index: u64) -> Result<ImageRGB8> {
    policy.validate()?;
    let mut rng = policy.rng(draw_index);

    let degrees = policy.rotations[rng.random_range(0..policy.rotations.len())];
    let mut out = rotate90(img, degrees / 90);
    if rng.random_bool(policy.flip_prob) {
        out = flip_horizontal(&out);
    }
    out = random_crop(&out, policy, &mut rng)?;
    out = resize_bilinear(&out, policy.output_size.0, policy.output_size.1)?;

    let blur = rng.random_bool(policy.blur_prob);
    let (lo, hi) = policy.blur_sigma;
    let sigma = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    if blur {
        out = gaussian_blur(&out, sigma as f32)?;
    }
    Ok(out)
}

/// Rotation (in degrees) that `augment` picks for a draw; exposed for audits.
pub fn drawn_rotation(policy: &AugmentationPolicy, draw_index: u64) -> u32 {
    let mut rng = policy.rng(draw_index);
    policy.rotations[rng.random_range(0..policy.rotations.len())]
}
