//! Randomised training patches: flip, rotate, then crop a `K×K` window
//! around a randomly chosen labelled pixel.
//!
//! The same geometric transform is applied to the image, the label map and
//! the weight map. Images are resampled bilinearly; labels and weights use
//! nearest-neighbour so they stay categorical. Samples falling outside the
//! field of view are mirrored back inside.

use rand::Rng;

use crate::annotation::{LabelMap, WeightMap};
use crate::error::{invalid, Error, Result};
use crate::raster::{reflect_index, Pixel, RgbImage};

/// Maximum random offset of the crop centre from the anchor, per axis.
pub const MAX_JITTER: i64 = 20;
/// Default patch side; divisible by 16 for four 2× down-samplings.
pub const DEFAULT_PATCH_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// Flip and rotation applied before cropping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeometricTransform {
    pub flip: Flip,
    /// Rotation about the image centre in whole degrees (1..=360).
    pub rotation_deg: Option<u32>,
}

impl GeometricTransform {
    pub const IDENTITY: Self = Self { flip: Flip::None, rotation_deg: None };

    /// Flip horizontally or vertically with probability 0.25 each; rotate
    /// with probability 0.5 by a uniform integer angle in `[1, 360]`.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let u: f64 = rng.gen();
        let flip = if u < 0.25 {
            Flip::Horizontal
        } else if u < 0.5 {
            Flip::Vertical
        } else {
            Flip::None
        };
        let rotation_deg = rng.gen_bool(0.5).then(|| rng.gen_range(1..=360));
        Self { flip, rotation_deg }
    }

    /// Where a source pixel lands after the transform, in continuous
    /// coordinates.
    pub fn map_point(&self, p: Pixel, height: usize, width: usize) -> (f64, f64) {
        let (mut r, mut c) = (p.0 as f64, p.1 as f64);
        match self.flip {
            Flip::Horizontal => c = (width - 1) as f64 - c,
            Flip::Vertical => r = (height - 1) as f64 - r,
            Flip::None => {}
        }
        if let Some(deg) = self.rotation_deg {
            let (cy, cx) = center(height, width);
            let (sin, cos) = (deg as f64).to_radians().sin_cos();
            let (dy, dx) = (r - cy, c - cx);
            r = cy + cos * dy - sin * dx;
            c = cx + sin * dy + cos * dx;
        }
        (r, c)
    }
}

fn center(height: usize, width: usize) -> (f64, f64) {
    ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0)
}

/// Source coordinate sampled by output pixel `(r, c)` under a rotation.
#[inline]
fn rotation_source(r: usize, c: usize, cy: f64, cx: f64, sin: f64, cos: f64) -> (f64, f64) {
    let (dy, dx) = (r as f64 - cy, c as f64 - cx);
    (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
}

fn remap_nearest<T: Copy>(src: &[T], height: usize, width: usize, channels: usize, map: impl Fn(usize, usize) -> (i64, i64)) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for r in 0..height {
        for c in 0..width {
            let (sr, sc) = map(r, c);
            let i = (reflect_index(sr, height) * width + reflect_index(sc, width)) * channels;
            out.extend_from_slice(&src[i..i + channels]);
        }
    }
    out
}

fn flip_map(flip: Flip, height: usize, width: usize) -> impl Fn(usize, usize) -> (i64, i64) {
    move |r, c| match flip {
        Flip::None => (r as i64, c as i64),
        Flip::Horizontal => (r as i64, (width - 1 - c) as i64),
        Flip::Vertical => ((height - 1 - r) as i64, c as i64),
    }
}

fn rotate_rgb(img: &RgbImage, deg: u32) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = center(h, w);
    let (sin, cos) = (deg as f64).to_radians().sin_cos();
    let mut out = RgbImage::new(h, w).expect("non-empty");
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = rotation_source(r, c, cy, cx, sin, cos);
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let (r0, c0) = (r0 as i64, c0 as i64);
            let taps = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c0 + 1, (1.0 - fr) * fc),
                (r0 + 1, c0, fr * (1.0 - fc)),
                (r0 + 1, c0 + 1, fr * fc),
            ];
            let mut acc = [0.0f64; 3];
            for (tr, tc, wt) in taps {
                let px = img.get(reflect_index(tr, h), reflect_index(tc, w));
                for k in 0..3 {
                    acc[k] += wt * px[k] as f64;
                }
            }
            out.set(r, c, acc.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    out
}

fn rotation_nearest_map(height: usize, width: usize, deg: u32) -> impl Fn(usize, usize) -> (i64, i64) {
    let (cy, cx) = center(height, width);
    let (sin, cos) = (deg as f64).to_radians().sin_cos();
    move |r, c| {
        let (sr, sc) = rotation_source(r, c, cy, cx, sin, cos);
        (sr.round() as i64, sc.round() as i64)
    }
}

fn check_aligned(image: &RgbImage, labels: &LabelMap, weights: &WeightMap) -> Result<()> {
    let dims = (image.height(), image.width());
    if dims != (labels.height(), labels.width()) || dims != (weights.height(), weights.width()) {
        return Err(Error::Shape("image, labels and weights must share dimensions".into()));
    }
    Ok(())
}

/// Apply flip then rotation to all three rasters.
pub fn transform_rasters(
    image: &RgbImage,
    labels: &LabelMap,
    weights: &WeightMap,
    transform: GeometricTransform,
) -> Result<(RgbImage, LabelMap, WeightMap)> {
    check_aligned(image, labels, weights)?;
    let (h, w) = (image.height(), image.width());
    let mut img = image.clone();
    let mut lab = labels.clone();
    let mut wts = weights.clone();
    if transform.flip != Flip::None {
        let map = flip_map(transform.flip, h, w);
        img = RgbImage::from_raw(h, w, remap_nearest(img.as_raw(), h, w, 3, &map))?;
        lab = LabelMap::from_vec(h, w, remap_nearest(lab.as_slice(), h, w, 1, &map))?;
        wts = WeightMap::from_vec(h, w, remap_nearest(wts.as_slice(), h, w, 1, &map))?;
    }
    if let Some(deg) = transform.rotation_deg {
        img = rotate_rgb(&img, deg);
        let map = rotation_nearest_map(h, w, deg);
        lab = LabelMap::from_vec(h, w, remap_nearest(lab.as_slice(), h, w, 1, &map))?;
        wts = WeightMap::from_vec(h, w, remap_nearest(wts.as_slice(), h, w, 1, &map))?;
    }
    Ok((img, lab, wts))
}

/// Reflection padding without repeating the edge pixel.
pub fn mirror_pad(image: &RgbImage, top: usize, bottom: usize, left: usize, right: usize) -> Result<RgbImage> {
    let (h, w) = (image.height(), image.width());
    if top >= h || bottom >= h || left >= w || right >= w {
        return Err(invalid(format!(
            "pad ({top}, {bottom}, {left}, {right}) too large for {h}x{w} image"
        )));
    }
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut out = RgbImage::new(oh, ow)?;
    for r in 0..oh {
        for c in 0..ow {
            let sr = reflect_index(r as i64 - top as i64, h);
            let sc = reflect_index(c as i64 - left as i64, w);
            out.set(r, c, image.get(sr, sc));
        }
    }
    Ok(out)
}

/// One `K×K` training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPatch {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub weights: WeightMap,
    /// Anchor pixel in the transformed field of view.
    pub anchor: Pixel,
    /// Centre of the crop in the transformed field of view.
    pub center: (i64, i64),
}

/// Crop a `K×K` window centred at `center`, mirroring where it leaves the
/// field of view.
pub fn crop_patch(
    image: &RgbImage,
    labels: &LabelMap,
    weights: &WeightMap,
    center: (i64, i64),
    k: usize,
) -> Result<(RgbImage, LabelMap, WeightMap)> {
    check_aligned(image, labels, weights)?;
    if k == 0 {
        return Err(invalid("patch size must be positive"));
    }
    let (h, w) = (image.height(), image.width());
    let (top, left) = (center.0 - (k / 2) as i64, center.1 - (k / 2) as i64);
    let idx: Vec<usize> = (0..k * k)
        .map(|i| {
            let sr = reflect_index(top + (i / k) as i64, h);
            let sc = reflect_index(left + (i % k) as i64, w);
            sr * w + sc
        })
        .collect();
    let mut rgb = Vec::with_capacity(k * k * 3);
    for &i in &idx {
        rgb.extend_from_slice(&image.as_raw()[i * 3..i * 3 + 3]);
    }
    let lab = idx.iter().map(|&i| labels.as_slice()[i]).collect();
    let wts = idx.iter().map(|&i| weights.as_slice()[i]).collect();
    Ok((RgbImage::from_raw(k, k, rgb)?, LabelMap::from_vec(k, k, lab)?, WeightMap::from_vec(k, k, wts)?))
}

/// Build a patch from an explicit transform, anchor choice and jitter.
/// `anchor_rank` indexes the labelled pixels of the transformed label map
/// in row-major order.
pub fn render_patch(
    image: &RgbImage,
    labels: &LabelMap,
    weights: &WeightMap,
    k: usize,
    transform: GeometricTransform,
    anchor_rank: usize,
    jitter: (i64, i64),
) -> Result<TrainingPatch> {
    let (img, lab, wts) = transform_rasters(image, labels, weights, transform)?;
    let labeled = lab.labeled_pixels();
    let anchor = *labeled
        .get(anchor_rank)
        .ok_or_else(|| Error::Sampling(format!("anchor rank {anchor_rank} of {} labelled pixels", labeled.len())))?;
    let center = (anchor.0 as i64 + jitter.0, anchor.1 as i64 + jitter.1);
    let (image, labels, weights) = crop_patch(&img, &lab, &wts, center, k)?;
    Ok(TrainingPatch { image, labels, weights, anchor, center })
}

/// Draw a random training patch from one field of view.
pub fn sample_patch<R: Rng + ?Sized>(
    image: &RgbImage,
    labels: &LabelMap,
    weights: &WeightMap,
    k: usize,
    rng: &mut R,
) -> Result<TrainingPatch> {
    if labels.as_slice().iter().all(|&l| l == 0) {
        return Err(Error::Sampling("field of view has no labelled pixel".into()));
    }
    let transform = GeometricTransform::draw(rng);
    let (img, lab, wts) = transform_rasters(image, labels, weights, transform)?;
    let labeled = lab.labeled_pixels();
    if labeled.is_empty() {
        // Rotation with reflection keeps the labelled area non-empty in
        // practice; a degenerate single-pixel label can still vanish.
        return Err(Error::Sampling("labelled pixels vanished under rotation".into()));
    }
    let anchor = labeled[rng.gen_range(0..labeled.len())];
    let jitter = (rng.gen_range(-MAX_JITTER..=MAX_JITTER), rng.gen_range(-MAX_JITTER..=MAX_JITTER));
    let center = (anchor.0 as i64 + jitter.0, anchor.1 as i64 + jitter.1);
    let (image, labels, weights) = crop_patch(&img, &lab, &wts, center, k)?;
    Ok(TrainingPatch { image, labels, weights, anchor, center })
}
