use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FaceSample;
use crate::error::Result;
use crate::geometry::Affine;

/// Rotation range in degrees, symmetric about zero.
pub const MAX_ROTATION_DEG: f64 = 30.0;
/// Scale range.
pub const SCALE_RANGE: (f64, f64) = (0.6, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { angle_deg: 0.0, scale: 1.0 };

    /// Angle ~ U(-30, 30) degrees, then scale ~ U(0.6, 1.0).
    pub fn sample(rng: &mut impl Rng) -> Self {
        let angle_deg = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        AugmentParams { angle_deg, scale }
    }
}

/// Rotates then scales `sample` about its crop center. The crop box is
/// pinned to its pre-augmentation position so the scale shows up as a
/// smaller face inside the crop.
pub fn augment_with(sample: &FaceSample, params: AugmentParams) -> Result<FaceSample> {
    let crop = sample.crop_box()?;
    let t = Affine::rotate_scale_about(crop.center, params.angle_deg.to_radians(), params.scale);
    Ok(sample.transformed(&t, crop))
}

/// [`augment_with`] on parameters drawn from `rng`.
pub fn augment(sample: &FaceSample, rng: &mut impl Rng) -> Result<(FaceSample, AugmentParams)> {
    let params = AugmentParams::sample(rng);
    Ok((augment_with(sample, params)?, params))
}
