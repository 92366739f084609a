//! Colour-statistics stain normalisation.
//!
//! Images are mapped into an orthonormal opponent colour space (one
//! achromatic axis, two chromatic axes), each axis is shifted and scaled so
//! its mean and standard deviation match a reference, and the result is
//! mapped back to RGB. Because the transform is orthonormal, statistics are
//! measured in intensity levels.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raster::RgbImage;

/// Scale factor applied when the source channel is (nearly) constant.
const ZERO_VARIANCE_EPS: f64 = 1e-6;

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT3: f64 = 0.577_350_269_189_625_8;
const INV_SQRT6: f64 = 0.408_248_290_463_863;

/// Channel statistics of a reference field of view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainReference {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[inline]
fn to_opponent(px: [u8; 3]) -> [f64; 3] {
    let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
    [
        (r + g + b) * INV_SQRT3,
        (r + g - 2.0 * b) * INV_SQRT6,
        (r - g) * INV_SQRT2,
    ]
}

#[inline]
fn from_opponent(v: [f64; 3]) -> [f64; 3] {
    let (l, a, b) = (v[0] * INV_SQRT3, v[1] * INV_SQRT6, v[2] * INV_SQRT2);
    [l + a + b, l + a - b, l - 2.0 * a]
}

fn opponent_stats(image: &RgbImage) -> StainReference {
    let n = (image.height() * image.width()) as f64;
    let mut mean = [0.0; 3];
    for px in image.pixels() {
        let v = to_opponent(px);
        for k in 0..3 {
            mean[k] += v[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 3];
    for px in image.pixels() {
        let v = to_opponent(px);
        for k in 0..3 {
            var[k] += (v[k] - mean[k]).powi(2);
        }
    }
    StainReference { mean, std: var.map(|s| (s / n).sqrt()) }
}

/// Measure the reference statistics of an RGB image.
pub fn fit_reference(image: &RgbImage) -> StainReference {
    opponent_stats(image)
}

/// Match the image's per-axis opponent statistics to `reference`.
pub fn normalize(image: &RgbImage, reference: &StainReference) -> Result<RgbImage> {
    let source = opponent_stats(image);
    let mut gain = [1.0; 3];
    for k in 0..3 {
        if source.std[k] > ZERO_VARIANCE_EPS {
            gain[k] = reference.std[k] / source.std[k];
        }
    }
    let mut data = Vec::with_capacity(image.as_raw().len());
    for px in image.pixels() {
        let v = to_opponent(px);
        let mut mapped = [0.0; 3];
        for k in 0..3 {
            mapped[k] = (v[k] - source.mean[k]) * gain[k] + reference.mean[k];
        }
        for c in from_opponent(mapped) {
            data.push(c.round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage::from_raw(image.height(), image.width(), data)
}
