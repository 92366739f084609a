//! From probability maps to scored detections, and threshold calibration.

use std::f64::consts::PI;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::connected_components;
use crate::model::ProbabilityMap;
use crate::raster::{BinaryMask, RgbImage};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_ECCENTRICITY_MAX: f64 = 0.8;
pub const DEFAULT_DIAMETERS: (f64, f64) = (24.0, 40.0);
/// Multipliers applied to the nominal smallest and largest disk areas.
pub const DEFAULT_AREA_SLACK: (f64, f64) = (0.5, 2.0);

/// Area bounds `[min, max]` in pixels from a diameter range, scaled by
/// `slack`. The lower bound never drops below one pixel.
pub fn size_bounds(diameter_min: f64, diameter_max: f64, slack: (f64, f64)) -> Result<(f64, f64)> {
    if !(diameter_min > 0.0 && diameter_min < diameter_max && diameter_max.is_finite()) {
        return Err(invalid(format!("need 0 < diameter_min < diameter_max, got {diameter_min}, {diameter_max}")));
    }
    if !(slack.0 > 0.0 && slack.1 > 0.0) {
        return Err(invalid("area slack factors must be positive"));
    }
    let disk = |d: f64| PI * (d / 2.0).powi(2);
    let lo = (slack.0 * disk(diameter_min)).max(1.0);
    let hi = slack.1 * disk(diameter_max);
    if lo >= hi {
        return Err(invalid(format!("area bounds collapse: [{lo}, {hi}]")));
    }
    Ok((lo, hi))
}

/// [`size_bounds`] with the default slack.
pub fn default_size_bounds(diameter_min: f64, diameter_max: f64) -> Result<(f64, f64)> {
    size_bounds(diameter_min, diameter_max, DEFAULT_AREA_SLACK)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub threshold: f32,
    pub eccentricity_max: f64,
    pub min_area: f64,
    pub max_area: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        let (min_area, max_area) = default_size_bounds(DEFAULT_DIAMETERS.0, DEFAULT_DIAMETERS.1).expect("valid defaults");
        Self { threshold: DEFAULT_THRESHOLD, eccentricity_max: DEFAULT_ECCENTRICITY_MAX, min_area, max_area }
    }
}

impl PostprocessConfig {
    pub fn with_threshold(threshold: f32) -> Self {
        Self { threshold, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(0.0 < self.min_area && self.min_area < self.max_area) {
            return Err(invalid(format!("area bounds [{}, {}] invalid", self.min_area, self.max_area)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub row: f64,
    pub col: f64,
    /// Mean probability over the region.
    pub confidence: f64,
    pub area: usize,
    pub eccentricity: f64,
}

/// One exported detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub fov_id: String,
    pub row: f64,
    pub col: f64,
    pub confidence: f64,
    pub area: usize,
    pub eccentricity: f64,
}

impl DetectionRecord {
    pub fn new(fov_id: &str, d: &Detection) -> Self {
        Self {
            fov_id: fov_id.to_string(),
            row: d.row,
            col: d.col,
            confidence: d.confidence,
            area: d.area,
            eccentricity: d.eccentricity,
        }
    }
}

/// Pixels with probability `≥ threshold`.
pub fn threshold_mask(probs: &ProbabilityMap, threshold: f32) -> BinaryMask {
    let data = probs.values().iter().map(|&p| p >= threshold).collect();
    BinaryMask::from_vec(probs.height(), probs.width(), data).expect("same dims")
}

/// Threshold, label 8-connected regions, drop elongated regions and then
/// regions outside the area bounds. Sorted by descending confidence, then
/// by centroid row and column.
pub fn detect(probs: &ProbabilityMap, config: &PostprocessConfig) -> Result<Vec<Detection>> {
    config.validate()?;
    let mask = threshold_mask(probs, config.threshold);
    let mut out: Vec<Detection> = connected_components(&mask)
        .into_iter()
        .filter(|r| r.eccentricity <= config.eccentricity_max)
        .filter(|r| (config.min_area..=config.max_area).contains(&(r.area as f64)))
        .map(|r| {
            let sum: f64 = r.pixels.iter().map(|&(y, x)| probs.get(y, x) as f64).sum();
            Detection {
                row: r.centroid.0,
                col: r.centroid.1,
                confidence: sum / r.area as f64,
                area: r.area,
                eccentricity: r.eccentricity,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.row.total_cmp(&b.row))
            .then(a.col.total_cmp(&b.col))
    });
    Ok(out)
}

/// Candidate thresholds `0.05, 0.06, …, 0.95`.
pub fn threshold_grid() -> Vec<f32> {
    (5..=95).map(|k| k as f32 / 100.0).collect()
}

/// Pixel disagreement between the new maps thresholded at `t` and the old
/// maps thresholded at `old_threshold`.
pub fn mask_disagreement(old: &[ProbabilityMap], new: &[ProbabilityMap], old_threshold: f32, t: f32) -> usize {
    old.iter()
        .zip(new)
        .map(|(o, n)| {
            o.values().iter().zip(n.values()).filter(|(&a, &b)| (a >= old_threshold) != (b >= t)).count()
        })
        .sum()
}

/// Threshold on `grid` whose new-model masks best reproduce the old-model
/// masks; ties go to the smallest candidate. With no reference maps the
/// old threshold is kept.
pub fn calibrate_threshold(old: &[ProbabilityMap], new: &[ProbabilityMap], old_threshold: f32, grid: &[f32]) -> Result<f32> {
    if old.len() != new.len() {
        return Err(invalid("old and new reference maps must pair up"));
    }
    if old.iter().zip(new).any(|(o, n)| (o.height(), o.width()) != (n.height(), n.width())) {
        return Err(invalid("reference maps differ in size"));
    }
    if old.is_empty() || grid.is_empty() {
        warn!("no reference fields of view; keeping threshold {old_threshold}");
        return Ok(old_threshold);
    }
    let mut best = (usize::MAX, old_threshold);
    for &t in grid {
        let d = mask_disagreement(old, new, old_threshold, t);
        if d < best.0 {
            best = (d, t);
        }
    }
    Ok(best.1)
}

/// Blue → cyan → yellow → red.
pub fn confidence_color(c: f64) -> [u8; 3] {
    let stops = [[0.0, 0.0, 255.0], [0.0, 255.0, 255.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]];
    let x = c.clamp(0.0, 1.0) * 3.0;
    let i = (x.floor() as usize).min(2);
    let f = x - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    [0, 1, 2].map(|k| (a[k] + f * (b[k] - a[k])).round() as u8)
}

/// Copy of `image` with a dot at every detection, coloured by confidence.
pub fn render_overlay(image: &RgbImage, detections: &[Detection]) -> RgbImage {
    let mut out = image.clone();
    let (h, w) = (image.height() as i64, image.width() as i64);
    for d in detections {
        let color = confidence_color(d.confidence);
        let (cr, cc) = (d.row.round() as i64, d.col.round() as i64);
        for dr in -5i64..=5 {
            for dc in -5i64..=5 {
                let (r, c) = (cr + dr, cc + dc);
                let d2 = dr * dr + dc * dc;
                if r < 0 || c < 0 || r >= h || c >= w || d2 > 25 {
                    continue;
                }
                let px = if d2 > 16 { [0, 0, 0] } else { color };
                out.set(r as usize, c as usize, px);
            }
        }
    }
    out
}
