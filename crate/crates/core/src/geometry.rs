//! Morphology and region primitives: disk dilation, 8-connected component
//! labelling, and second-moment region statistics.

use std::collections::VecDeque;

use crate::error::{invalid, Result};
use crate::raster::{BinaryMask, Pixel};

/// Per-axis variance of a unit pixel treated as a uniform square.
const PIXEL_EXTENT_VARIANCE: f64 = 1.0 / 12.0;

/// A maximal 8-connected set of foreground pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub pixels: Vec<Pixel>,
    pub area: usize,
    pub centroid: (f64, f64),
    pub eccentricity: f64,
}

impl Region {
    pub fn from_pixels(pixels: Vec<Pixel>) -> Result<Self> {
        let moments = region_moments(&pixels)?;
        Ok(Self {
            area: pixels.len(),
            centroid: moments.centroid,
            eccentricity: moments.eccentricity,
            pixels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMoments {
    pub centroid: (f64, f64),
    pub eccentricity: f64,
}

/// Mark every pixel within Euclidean distance `radius` (inclusive) of any
/// seed point. The disk is clipped at the image boundary.
pub fn disk_dilate(points: &[Pixel], radius: f64, height: usize, width: usize) -> Result<BinaryMask> {
    if !(radius >= 0.0) {
        return Err(invalid(format!("dilation radius must be >= 0, got {radius}")));
    }
    let mut mask = BinaryMask::new(height, width)?;
    let r2 = radius * radius;
    let reach = radius.floor() as i64;
    for &(pr, pc) in points {
        if pr >= height || pc >= width {
            return Err(invalid(format!("point ({pr}, {pc}) outside {height}x{width} image")));
        }
        let (pr, pc) = (pr as i64, pc as i64);
        let r_lo = (pr - reach).max(0);
        let r_hi = (pr + reach).min(height as i64 - 1);
        for r in r_lo..=r_hi {
            let dr = (r - pr) as f64;
            let rem = r2 - dr * dr;
            if rem < 0.0 {
                continue;
            }
            let half = rem.sqrt().floor() as i64;
            let c_lo = (pc - half).max(0);
            let c_hi = (pc + half).min(width as i64 - 1);
            for c in c_lo..=c_hi {
                mask.set(r as usize, c as usize, true);
            }
        }
    }
    Ok(mask)
}

/// Partition the foreground into maximal 8-connected regions, ordered by the
/// row-major position of each region's first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Region> {
    let (h, w) = (mask.height(), mask.width());
    let mut visited = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if visited[start] || !mask.as_slice()[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            pixels.push((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let n = nr as usize * w + nc as usize;
                    if !visited[n] && mask.as_slice()[n] {
                        visited[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        pixels.sort_unstable();
        regions.push(Region::from_pixels(pixels).expect("non-empty region"));
    }
    regions
}

/// Centroid and eccentricity of the ellipse sharing the region's second
/// moments. Each pixel contributes its unit-square extent (`1/12` per axis),
/// so a single pixel has eccentricity 0.
pub fn region_moments(pixels: &[Pixel]) -> Result<RegionMoments> {
    if pixels.is_empty() {
        return Err(invalid("region moments of an empty pixel set"));
    }
    let n = pixels.len() as f64;
    let (sum_r, sum_c) = pixels
        .iter()
        .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
    let (mr, mc) = (sum_r / n, sum_c / n);
    let (mut srr, mut scc, mut src) = (0.0, 0.0, 0.0);
    for &(r, c) in pixels {
        let (dr, dc) = (r as f64 - mr, c as f64 - mc);
        srr += dr * dr;
        scc += dc * dc;
        src += dr * dc;
    }
    let vrr = srr / n + PIXEL_EXTENT_VARIANCE;
    let vcc = scc / n + PIXEL_EXTENT_VARIANCE;
    let vrc = src / n;
    let mid = 0.5 * (vrr + vcc);
    let spread = (0.25 * (vrr - vcc) * (vrr - vcc) + vrc * vrc).sqrt();
    let major = mid + spread;
    let minor = mid - spread;
    let eccentricity = (1.0 - minor / major).max(0.0).sqrt();
    Ok(RegionMoments { centroid: (mr, mc), eccentricity })
}
