//! Free-form annotations and their compilation into per-pixel supervision.
//!
//! Four annotation kinds are supported: positive points (clicks near a
//! lymphocyte centre), positive scribbles, negative points (clicks inside
//! look-alike objects) and negative scribbles. Points are dilated by disks
//! whose radii derive from the expected lymphocyte size; scribbles are used
//! as drawn.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::disk_dilate;
use crate::raster::{check_dims, save_gray, BinaryMask, Pixel, RgbImage};

/// Default positive dilation radius, from the 24-40 px lymphocyte diameter.
pub const DEFAULT_R1: f64 = 11.0;
/// `PP1` uses `r1 - 5`, `NP1` uses `r1 + 5`.
pub const RADIUS_OFFSET: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotationKind {
    #[serde(rename = "PP")]
    PositivePoint,
    #[serde(rename = "PS")]
    PositiveScribble,
    #[serde(rename = "NP")]
    NegativePoint,
    #[serde(rename = "NS")]
    NegativeScribble,
}

impl AnnotationKind {
    pub fn is_point(self) -> bool {
        matches!(self, Self::PositivePoint | Self::NegativePoint)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    #[default]
    Public,
    InHouse,
    Correction,
}

/// One persisted annotation: a click or a stroke on a field of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub fov_id: String,
    pub kind: AnnotationKind,
    pub points: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(invalid("annotation has no points"));
        }
        if self.kind.is_point() && self.points.len() != 1 {
            return Err(invalid(format!(
                "{:?} annotation must carry exactly one point, got {}",
                self.kind,
                self.points.len()
            )));
        }
        Ok(())
    }
}

/// All annotations attached to one field of view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub fov_id: String,
    pub positive_points: Vec<Pixel>,
    pub positive_scribbles: Vec<Vec<Pixel>>,
    pub negative_points: Vec<Pixel>,
    pub negative_scribbles: Vec<Vec<Pixel>>,
    pub source: AnnotationSource,
}

impl AnnotationSet {
    pub fn new(fov_id: impl Into<String>) -> Self {
        Self { fov_id: fov_id.into(), ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.positive_points.is_empty()
            && self.positive_scribbles.is_empty()
            && self.negative_points.is_empty()
            && self.negative_scribbles.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positive_points.len()
            + self.positive_scribbles.len()
            + self.negative_points.len()
            + self.negative_scribbles.len()
    }

    pub fn push(&mut self, record: &AnnotationRecord) -> Result<()> {
        record.validate()?;
        let pts: Vec<Pixel> = record.points.iter().map(|p| (p[0], p[1])).collect();
        match record.kind {
            AnnotationKind::PositivePoint => self.positive_points.push(pts[0]),
            AnnotationKind::NegativePoint => self.negative_points.push(pts[0]),
            AnnotationKind::PositiveScribble => self.positive_scribbles.push(pts),
            AnnotationKind::NegativeScribble => self.negative_scribbles.push(pts),
        }
        Ok(())
    }

    pub fn records(&self) -> Vec<AnnotationRecord> {
        let rec = |kind, points: Vec<[usize; 2]>| AnnotationRecord {
            fov_id: self.fov_id.clone(),
            kind,
            points,
            timestamp: None,
            author: None,
        };
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.positive_points.iter().map(|&(r, c)| rec(AnnotationKind::PositivePoint, vec![[r, c]])));
        out.extend(
            self.positive_scribbles
                .iter()
                .map(|s| rec(AnnotationKind::PositiveScribble, s.iter().map(|&(r, c)| [r, c]).collect())),
        );
        out.extend(self.negative_points.iter().map(|&(r, c)| rec(AnnotationKind::NegativePoint, vec![[r, c]])));
        out.extend(
            self.negative_scribbles
                .iter()
                .map(|s| rec(AnnotationKind::NegativeScribble, s.iter().map(|&(r, c)| [r, c]).collect())),
        );
        out
    }

    /// Every coordinate referenced by the set, scribbles rasterised.
    pub fn annotated_pixels(&self) -> Vec<Pixel> {
        let mut px: Vec<Pixel> = self.positive_points.clone();
        px.extend(self.negative_points.iter().copied());
        for s in self.positive_scribbles.iter().chain(&self.negative_scribbles) {
            px.extend(rasterize_polyline(s));
        }
        px
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for (r, c) in self.positive_points.iter().chain(&self.negative_points).copied().chain(
            self.positive_scribbles.iter().chain(&self.negative_scribbles).flatten().copied(),
        ) {
            if r >= height || c >= width {
                return Err(invalid(format!(
                    "annotation ({r}, {c}) on {} lies outside {height}x{width}",
                    self.fov_id
                )));
            }
        }
        Ok(())
    }
}

/// Group records by field of view.
pub fn group_records(records: &[AnnotationRecord], source: AnnotationSource) -> Result<BTreeMap<String, AnnotationSet>> {
    let mut sets: BTreeMap<String, AnnotationSet> = BTreeMap::new();
    for rec in records {
        let set = sets.entry(rec.fov_id.clone()).or_insert_with(|| AnnotationSet {
            source,
            ..AnnotationSet::new(rec.fov_id.clone())
        });
        set.push(rec)?;
    }
    Ok(sets)
}

/// Read newline-delimited JSON annotation records.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut file, rec)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// One-pixel-wide Bresenham rasterisation of consecutive stroke samples.
pub fn rasterize_polyline(points: &[Pixel]) -> Vec<Pixel> {
    let mut out = Vec::new();
    match points {
        [] => {}
        [p] => out.push(*p),
        _ => {
            for seg in points.windows(2) {
                let start = out.len();
                bresenham(seg[0], seg[1], &mut out);
                // consecutive segments share their joint pixel
                if start > 0 && out.get(start) == out.get(start - 1) {
                    out.remove(start);
                }
            }
        }
    }
    out
}

fn bresenham(a: Pixel, b: Pixel, out: &mut Vec<Pixel>) {
    let (mut r, mut c) = (a.0 as i64, a.1 as i64);
    let (r1, c1) = (b.0 as i64, b.1 as i64);
    let dr = (r1 - r).abs();
    let dc = -(c1 - c).abs();
    let sr = if r < r1 { 1 } else { -1 };
    let sc = if c < c1 { 1 } else { -1 };
    let mut err = dr + dc;
    loop {
        out.push((r as usize, c as usize));
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
}

/// Per-pixel training target: 0 ignore, 1 non-lymphocyte, 2 lymphocyte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

pub const LABEL_IGNORE: u8 = 0;
pub const LABEL_NEGATIVE: u8 = 1;
pub const LABEL_POSITIVE: u8 = 2;

impl LabelMap {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self { height, width, data: vec![LABEL_IGNORE; height * width] })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width || data.iter().any(|&l| l > LABEL_POSITIVE) {
            return Err(invalid("label data must have one value in {0,1,2} per pixel"));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn labeled_pixels(&self) -> Vec<Pixel> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > LABEL_IGNORE)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    /// Audit export: labels 0/1/2 as grey levels 0/128/255.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&l| [0u8, 128, 255][l as usize]).collect();
        save_gray(path, self.height, self.width, &bytes)
    }
}

/// Per-pixel loss weight in `{0, 0.5, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl WeightMap {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self { height, width, data: vec![0.0; height * width] })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width || data.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("weight data must have one non-negative value per pixel"));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|w| w * factor).collect() }
    }

    /// Audit export: weights 0/0.5/1 as grey levels 0/128/255.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&w| if w >= 1.0 { 255 } else if w > 0.0 { 128 } else { 0 })
            .collect();
        save_gray(path, self.height, self.width, &bytes)
    }
}

fn rasterize_all(scribbles: &[Vec<Pixel>], height: usize, width: usize) -> Result<BinaryMask> {
    let mut mask = BinaryMask::new(height, width)?;
    for s in scribbles {
        for (r, c) in rasterize_polyline(s) {
            mask.set(r, c, true);
        }
    }
    Ok(mask)
}

/// Build the label and weight images for one field of view.
///
/// With `PP1 = dilate(PP, r1 - 5)`, `PP2 = dilate(PP, r1)` and
/// `NP1 = dilate(NP, r1 + 5)`: pixels in `NP1 ∪ NS` get label 1 and weight 1,
/// otherwise pixels in `PP2 ∪ PS` get label 2 with weight 1 on `PP1 ∪ PS` and
/// 0.5 on the remaining annulus. Everything else is label 0, weight 0.
pub fn compile_maps(annotations: &AnnotationSet, height: usize, width: usize, r1: f64) -> Result<(LabelMap, WeightMap)> {
    if !(r1 > RADIUS_OFFSET) {
        return Err(Error::Config(format!("r1 must exceed {RADIUS_OFFSET}, got {r1}")));
    }
    annotations.check_bounds(height, width)?;
    let pp_core = disk_dilate(&annotations.positive_points, r1 - RADIUS_OFFSET, height, width)?;
    let pp_full = disk_dilate(&annotations.positive_points, r1, height, width)?;
    let np_full = disk_dilate(&annotations.negative_points, r1 + RADIUS_OFFSET, height, width)?;
    let ps = rasterize_all(&annotations.positive_scribbles, height, width)?;
    let ns = rasterize_all(&annotations.negative_scribbles, height, width)?;

    let mut labels = LabelMap::new(height, width)?;
    let mut weights = WeightMap::new(height, width)?;
    for i in 0..height * width {
        let (r, c) = (i / width, i % width);
        if np_full.get(r, c) || ns.get(r, c) {
            labels.data[i] = LABEL_NEGATIVE;
            weights.data[i] = 1.0;
        } else if pp_core.get(r, c) || ps.get(r, c) {
            labels.data[i] = LABEL_POSITIVE;
            weights.data[i] = 1.0;
        } else if pp_full.get(r, c) {
            labels.data[i] = LABEL_POSITIVE;
            weights.data[i] = 0.5;
        }
    }
    Ok((labels, weights))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileSpec {
    pub patch: usize,
    pub stride: usize,
    pub center: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self { patch: 400, stride: 200, center: 200 }
    }
}

/// Window origins along one axis: regular steps, plus a final window snapped
/// to the far edge when the steps do not reach it.
pub fn window_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if dim < patch || stride == 0 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=(dim - patch) / stride).map(|k| k * stride).collect();
    if *starts.last().unwrap() + patch < dim {
        starts.push(dim - patch);
    }
    starts
}

/// Cut a large sparsely annotated field of view into overlapping patches,
/// keeping only patches whose central region contains an annotation.
pub fn tile_fov(fov: &RgbImage, annotations: &AnnotationSet, spec: TileSpec) -> Result<Vec<(RgbImage, AnnotationSet)>> {
    let TileSpec { patch, stride, center } = spec;
    if stride == 0 || center == 0 || center > patch {
        return Err(Error::Config(format!("invalid tiling {spec:?}")));
    }
    if fov.height() < patch || fov.width() < patch {
        return Err(invalid(format!(
            "field of view {}x{} smaller than {patch}x{patch} patch",
            fov.height(),
            fov.width()
        )));
    }
    annotations.check_bounds(fov.height(), fov.width())?;
    let annotated = annotations.annotated_pixels();
    let margin = (patch - center) / 2;
    let mut out = Vec::new();
    for &r0 in &window_starts(fov.height(), patch, stride) {
        for &c0 in &window_starts(fov.width(), patch, stride) {
            let (cr0, cc0) = (r0 + margin, c0 + margin);
            let keep = annotated
                .iter()
                .any(|&(r, c)| r >= cr0 && r < cr0 + center && c >= cc0 && c < cc0 + center);
            if !keep {
                continue;
            }
            out.push((crop_rgb(fov, r0, c0, patch), crop_annotations(annotations, r0, c0, patch)));
        }
    }
    Ok(out)
}

fn crop_rgb(img: &RgbImage, r0: usize, c0: usize, size: usize) -> RgbImage {
    let mut data = Vec::with_capacity(size * size * 3);
    for r in r0..r0 + size {
        let start = (r * img.width() + c0) * 3;
        data.extend_from_slice(&img.as_raw()[start..start + size * 3]);
    }
    RgbImage::from_raw(size, size, data).expect("crop dims")
}

fn crop_annotations(ann: &AnnotationSet, r0: usize, c0: usize, size: usize) -> AnnotationSet {
    let inside = |&(r, c): &Pixel| r >= r0 && r < r0 + size && c >= c0 && c < c0 + size;
    let shift = |(r, c): Pixel| (r - r0, c - c0);
    let clip_strokes = |strokes: &[Vec<Pixel>]| -> Vec<Vec<Pixel>> {
        let mut out = Vec::new();
        for s in strokes {
            let mut run = Vec::new();
            for p in rasterize_polyline(s) {
                if inside(&p) {
                    run.push(shift(p));
                } else if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
            }
            if !run.is_empty() {
                out.push(run);
            }
        }
        out
    };
    AnnotationSet {
        fov_id: format!("{}@{}_{}", ann.fov_id, r0, c0),
        positive_points: ann.positive_points.iter().filter(|p| inside(p)).map(|&p| shift(p)).collect(),
        positive_scribbles: clip_strokes(&ann.positive_scribbles),
        negative_points: ann.negative_points.iter().filter(|p| inside(p)).map(|&p| shift(p)).collect(),
        negative_scribbles: clip_strokes(&ann.negative_scribbles),
        source: ann.source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub training: Vec<T>,
    pub validation: Vec<T>,
}

/// Shuffle under `seed` and hold out `round((1 - ratio) * N)` items,
/// keeping at least one item on each side.
pub fn split_dataset<T>(items: Vec<T>, ratio: f64, seed: u64) -> Result<DatasetSplit<T>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = items.len();
    if n < 2 {
        return Err(invalid(format!("need at least 2 items to split, got {n}")));
    }
    let train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    split_dataset_counts(items, n - train, seed)
}

/// Shuffle under `seed` and hold out exactly `validation` items.
pub fn split_dataset_counts<T>(mut items: Vec<T>, validation: usize, seed: u64) -> Result<DatasetSplit<T>> {
    let n = items.len();
    if n < 2 || validation == 0 || validation >= n {
        return Err(invalid(format!("cannot hold out {validation} of {n} items")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let held = items.split_off(n - validation);
    Ok(DatasetSplit { training: items, validation: held })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d2(a: Pixel, b: Pixel) -> f64 {
        (a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)
    }

    #[test]
    fn single_positive_point() {
        let mut ann = AnnotationSet::new("f");
        ann.positive_points.push((100, 100));
        let (l, w) = compile_maps(&ann, 200, 200, 11.0).unwrap();
        assert_eq!((l.get(100, 104), w.get(100, 104)), (2, 1.0));
        assert_eq!((l.get(100, 108), w.get(100, 108)), (2, 0.5));
        assert_eq!((l.get(100, 115), w.get(100, 115)), (0, 0.0));
    }

    #[test]
    fn single_negative_point() {
        let mut ann = AnnotationSet::new("f");
        ann.negative_points.push((50, 50));
        let (l, w) = compile_maps(&ann, 120, 120, 11.0).unwrap();
        for r in 0..120 {
            for c in 0..120 {
                let inside = d2((r, c), (50, 50)) <= 256.0;
                assert_eq!(l.get(r, c), if inside { 1 } else { 0 });
                assert_eq!(w.get(r, c), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn empty_annotations_compile_to_zero() {
        let (l, w) = compile_maps(&AnnotationSet::new("e"), 30, 40, 11.0).unwrap();
        assert!(l.as_slice().iter().all(|&v| v == 0));
        assert!(w.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radius_must_exceed_offset() {
        let ann = AnnotationSet::new("e");
        assert!(matches!(compile_maps(&ann, 10, 10, 5.0), Err(Error::Config(_))));
    }

    #[test]
    fn negative_overrides_positive() {
        let mut ann = AnnotationSet::new("f");
        ann.positive_points.push((20, 20));
        ann.negative_scribbles.push(vec![(20, 10), (20, 30)]);
        let (l, w) = compile_maps(&ann, 40, 40, 11.0).unwrap();
        assert_eq!(l.get(20, 20), 1);
        assert_eq!(w.get(20, 20), 1.0);
        assert_eq!(l.get(21, 20), 2);
    }

    #[test]
    fn out_of_bounds_annotation_rejected() {
        let mut ann = AnnotationSet::new("f");
        ann.positive_scribbles.push(vec![(1, 1), (1, 50)]);
        assert!(compile_maps(&ann, 40, 40, 11.0).is_err());
    }

    #[test]
    fn polyline_is_connected() {
        let px = rasterize_polyline(&[(0, 0), (3, 7), (10, 2)]);
        assert_eq!(px.first(), Some(&(0, 0)));
        assert_eq!(px.last(), Some(&(10, 2)));
        for w in px.windows(2) {
            let dr = w[0].0.abs_diff(w[1].0);
            let dc = w[0].1.abs_diff(w[1].1);
            assert!(dr <= 1 && dc <= 1 && dr + dc > 0, "{w:?}");
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_starts(800, 400, 200), vec![0, 200, 400]);
        assert_eq!(window_starts(1200, 400, 200).len(), 5);
        assert_eq!(window_starts(500, 400, 200), vec![0, 100]);
        assert_eq!(window_starts(400, 400, 200), vec![0]);
    }

    #[test]
    fn tiling_center_filter() {
        let fov = RgbImage::new(400, 400).unwrap();
        let mut ann = AnnotationSet::new("big");
        ann.positive_points.push((200, 200));
        assert_eq!(tile_fov(&fov, &ann, TileSpec::default()).unwrap().len(), 1);

        let mut ann = AnnotationSet::new("big");
        ann.positive_points.push((10, 10));
        assert!(tile_fov(&fov, &ann, TileSpec::default()).unwrap().is_empty());

        let small = RgbImage::new(300, 500).unwrap();
        assert!(tile_fov(&small, &ann, TileSpec::default()).is_err());
    }

    #[test]
    fn tiling_reexpresses_coordinates() {
        let fov = RgbImage::new(800, 1200).unwrap();
        let mut ann = AnnotationSet::new("big");
        ann.positive_points.push((350, 650));
        ann.negative_scribbles.push(vec![(300, 380), (300, 420)]);
        let tiles = tile_fov(&fov, &ann, TileSpec::default()).unwrap();
        let (_, t) = tiles.iter().find(|(_, a)| a.fov_id == "big@200_400").unwrap();
        assert_eq!(t.positive_points, vec![(150, 250)]);
        assert_eq!(t.negative_scribbles.len(), 1);
        assert_eq!(t.negative_scribbles[0].first(), Some(&(100, 0)));
        assert_eq!(t.negative_scribbles[0].last(), Some(&(100, 20)));
    }

    #[test]
    fn split_sizes() {
        let s = split_dataset((0..100).collect(), 0.9, 7).unwrap();
        assert_eq!((s.training.len(), s.validation.len()), (90, 10));
        let s = split_dataset(vec![1, 2], 0.9, 7).unwrap();
        assert_eq!((s.training.len(), s.validation.len()), (1, 1));
        assert!(split_dataset(vec![1], 0.9, 7).is_err());

        let s = split_dataset_counts((0..7335).collect(), 735, 3).unwrap();
        assert_eq!((s.training.len(), s.validation.len()), (6600, 735));

        let a = split_dataset((0..50).collect::<Vec<_>>(), 0.9, 11).unwrap();
        let b = split_dataset((0..50).collect::<Vec<_>>(), 0.9, 11).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<_> = a.training.iter().chain(&a.validation).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn records_roundtrip_through_sets() {
        let mut ann = AnnotationSet::new("x");
        ann.positive_points.push((1, 2));
        ann.negative_scribbles.push(vec![(3, 4), (5, 6)]);
        let json = serde_json::to_string(&ann.records()[1]).unwrap();
        assert_eq!(json, r#"{"fov_id":"x","kind":"NS","points":[[3,4],[5,6]]}"#);
        let sets = group_records(&ann.records(), AnnotationSource::Public).unwrap();
        assert_eq!(sets["x"], ann);
    }

    #[test]
    fn point_records_need_one_point() {
        let rec = AnnotationRecord {
            fov_id: "a".into(),
            kind: AnnotationKind::PositivePoint,
            points: vec![[1, 1], [2, 2]],
            timestamp: None,
            author: None,
        };
        assert!(rec.validate().is_err());
    }
}
