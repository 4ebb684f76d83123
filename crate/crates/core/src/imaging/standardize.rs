use super::{AcquisitionParams, ImageVolume};
use crate::Result;

/// Affine gain/offset/exposure normalization to a reference operating point:
///
/// `out = clamp(round(((v − b)/g) · g_ref · (kVp_ref·mAs_ref)/(kVp·mAs) + b_ref), 0, 65535)`
///
/// This is a surrogate for a physics-based standard form; it removes the
/// detector response and exposure scaling but models no tissue physics.
pub fn standardize(
    img: &ImageVolume,
    params: &AcquisitionParams,
    reference: &AcquisitionParams,
) -> Result<ImageVolume> {
    params.validate()?;
    reference.validate()?;
    let scale = reference.detector_gain * reference.exposure_factor() / params.exposure_factor();
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| {
            let tissue = (f64::from(v) - params.detector_offset) / params.detector_gain;
            let out = (tissue * scale + reference.detector_offset).round();
            out.clamp(0.0, f64::from(u16::MAX)) as u16
        })
        .collect();
    Ok(img.with_pixels(pixels))
}
