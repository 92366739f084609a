//! Synthetic H&E-like fields of view with exact ground truth.
//!
//! Lymphocytes are dark purple disks with a wobbly boundary on a pink
//! textured background. Distractors are paler disks or elongated blobs.
//! Ground truth is a point at every object centre (positive for
//! lymphocytes, negative for distractors), negative strokes across the
//! contact zone of clustered pairs, and a few negative background strokes.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{write_records, AnnotationSet};
use crate::error::{Error, Result};
use crate::raster::{Pixel, RgbImage};

pub const MIN_RADIUS: f64 = 12.0;
pub const MAX_RADIUS: f64 = 20.0;
/// Minimum centre distance between lymphocytes that are not a pair.
pub const LYMPHOCYTE_SPACING: f64 = 50.0;
const PAIR_RADIUS: (f64, f64) = (12.0, 14.0);
const PAIR_SPACING: (f64, f64) = (0.95, 1.05);
const BORDER_MARGIN: f64 = 6.0;
const CLEARANCE: f64 = 12.0;
const ATTEMPTS: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Lymphocyte,
    /// Paler disk.
    PaleDistractor,
    /// Elongated blob.
    ElongatedDistractor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub center: Pixel,
    /// Disk radius, or the semi-major axis of an elongated blob.
    pub radius: f64,
    pub kind: ObjectKind,
    /// Semi-minor axis and orientation of elongated blobs.
    pub minor: f64,
    pub angle: f64,
    /// Index of the partner object for clustered lymphocyte pairs.
    pub partner: Option<usize>,
}

impl SceneObject {
    pub fn is_lymphocyte(&self) -> bool {
        self.kind == ObjectKind::Lymphocyte
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub lymphocytes: usize,
    pub distractors: usize,
    /// Fraction in `[0, 1]` of lymphocytes placed as near-touching pairs.
    pub clustering: f64,
    /// Negative strokes drawn on plain background.
    pub background_strokes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { height: 256, width: 256, lymphocytes: 6, distractors: 3, clustering: 0.0, background_strokes: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
    pub image: RgbImage,
    pub annotations: AnnotationSet,
}

impl SyntheticScene {
    pub fn lymphocyte_centers(&self) -> Vec<(f64, f64)> {
        self.objects.iter().filter(|o| o.is_lymphocyte()).map(|o| (o.center.0 as f64, o.center.1 as f64)).collect()
    }

    /// Write `<stem>.png` and `<stem>.jsonl` (annotation records) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.image.save_png(dir.join(format!("{stem}.png")))?;
        write_records(dir.join(format!("{stem}.jsonl")), &self.annotations.records())
    }
}

fn dist(a: Pixel, b: Pixel) -> f64 {
    let (dr, dc) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
    (dr * dr + dc * dc).sqrt()
}

struct Placer<'a, R: Rng + ?Sized> {
    cfg: &'a SceneConfig,
    rng: &'a mut R,
    objects: Vec<SceneObject>,
}

impl<R: Rng + ?Sized> Placer<'_, R> {
    fn inside(&self, c: (f64, f64), radius: f64) -> bool {
        let m = radius.max(BORDER_MARGIN);
        c.0 >= m && c.1 >= m && c.0 <= self.cfg.height as f64 - 1.0 - m && c.1 <= self.cfg.width as f64 - 1.0 - m
    }

    fn random_center(&mut self, radius: f64) -> Option<Pixel> {
        let m = radius.max(BORDER_MARGIN).ceil() as usize;
        let (h, w) = (self.cfg.height, self.cfg.width);
        if h <= 2 * m || w <= 2 * m {
            return None;
        }
        Some((self.rng.gen_range(m..h - m), self.rng.gen_range(m..w - m)))
    }

    fn clear_of_others(&self, center: Pixel, radius: f64, lymphocyte: bool, skip: Option<usize>) -> bool {
        self.objects.iter().enumerate().all(|(i, o)| {
            if Some(i) == skip {
                return true;
            }
            let d = dist(center, o.center);
            if lymphocyte && o.is_lymphocyte() {
                d >= LYMPHOCYTE_SPACING && d >= radius + o.radius + CLEARANCE
            } else {
                d >= radius + o.radius + CLEARANCE
            }
        })
    }

    fn place_single(&mut self, kind: ObjectKind) -> Result<()> {
        for _ in 0..ATTEMPTS {
            let (radius, minor, angle) = match kind {
                ObjectKind::Lymphocyte => (self.rng.gen_range(MIN_RADIUS..=MAX_RADIUS), 0.0, 0.0),
                ObjectKind::PaleDistractor => (self.rng.gen_range(16.0..=MAX_RADIUS), 0.0, 0.0),
                ObjectKind::ElongatedDistractor => {
                    (self.rng.gen_range(17.0..=MAX_RADIUS), self.rng.gen_range(5.0..=7.0), self.rng.gen_range(0.0..PI))
                }
            };
            let Some(center) = self.random_center(radius) else { break };
            if self.clear_of_others(center, radius, kind == ObjectKind::Lymphocyte, None) {
                self.objects.push(SceneObject { center, radius, kind, minor, angle, partner: None });
                return Ok(());
            }
        }
        Err(Error::Infeasible(format!(
            "could not place {kind:?} in a {}x{} field with {} objects",
            self.cfg.height,
            self.cfg.width,
            self.objects.len()
        )))
    }

    fn place_pair(&mut self) -> Result<()> {
        for _ in 0..ATTEMPTS {
            let ra = self.rng.gen_range(PAIR_RADIUS.0..=PAIR_RADIUS.1);
            let rb = self.rng.gen_range(PAIR_RADIUS.0..=PAIR_RADIUS.1);
            let d = self.rng.gen_range(PAIR_SPACING.0..=PAIR_SPACING.1) * (ra + rb);
            let theta = self.rng.gen_range(0.0..2.0 * PI);
            let Some(a) = self.random_center(ra) else { break };
            let b = (a.0 as f64 + d * theta.sin(), a.1 as f64 + d * theta.cos());
            if !self.inside(b, rb) {
                continue;
            }
            let b = (b.0.round() as usize, b.1.round() as usize);
            // partners are tested against everything else, not each other
            if !self.clear_of_others(a, ra, true, None) || !self.clear_of_others(b, rb, true, None) {
                continue;
            }
            let ia = self.objects.len();
            let obj = |center, radius, partner| SceneObject {
                center,
                radius,
                kind: ObjectKind::Lymphocyte,
                minor: 0.0,
                angle: 0.0,
                partner: Some(partner),
            };
            self.objects.push(obj(a, ra, ia + 1));
            self.objects.push(obj(b, rb, ia));
            return Ok(());
        }
        Err(Error::Infeasible(format!(
            "could not place a lymphocyte pair in a {}x{} field",
            self.cfg.height, self.cfg.width
        )))
    }
}

/// Generate one scene. Deterministic for a given rng state.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<SyntheticScene> {
    if !(0.0..=1.0).contains(&cfg.clustering) {
        return Err(Error::Config("clustering must lie in [0, 1]".into()));
    }
    crate::raster::check_dims(cfg.height, cfg.width)?;
    // each isolated lymphocyte claims a disk of radius LYMPHOCYTE_SPACING/2
    let claimed = (cfg.lymphocytes as f64) * PI * (LYMPHOCYTE_SPACING / 2.0).powi(2)
        + (cfg.distractors as f64) * PI * (MAX_RADIUS + CLEARANCE / 2.0).powi(2);
    let usable = (cfg.height as f64 - 2.0 * BORDER_MARGIN).max(0.0) * (cfg.width as f64 - 2.0 * BORDER_MARGIN).max(0.0);
    if claimed > 0.6 * usable {
        return Err(Error::Infeasible(format!(
            "{} lymphocytes and {} distractors do not fit in {}x{}",
            cfg.lymphocytes, cfg.distractors, cfg.height, cfg.width
        )));
    }

    let pairs = ((cfg.clustering * (cfg.lymphocytes / 2) as f64).round() as usize).min(cfg.lymphocytes / 2);
    let mut placer = Placer { cfg, rng, objects: Vec::new() };
    for _ in 0..pairs {
        placer.place_pair()?;
    }
    for _ in 0..cfg.lymphocytes - 2 * pairs {
        placer.place_single(ObjectKind::Lymphocyte)?;
    }
    for i in 0..cfg.distractors {
        let kind = if i % 2 == 0 { ObjectKind::PaleDistractor } else { ObjectKind::ElongatedDistractor };
        placer.place_single(kind)?;
    }
    let objects = placer.objects;
    let rng = placer.rng;

    let image = render(cfg, &objects, rng);
    let mut annotations = AnnotationSet::new("synthetic");
    for o in &objects {
        if o.is_lymphocyte() {
            annotations.positive_points.push(o.center);
        } else {
            annotations.negative_points.push(o.center);
        }
    }
    for (i, o) in objects.iter().enumerate() {
        if let Some(j) = o.partner.filter(|&j| j > i) {
            annotations.negative_scribbles.extend(contact_strokes(o, &objects[j], cfg));
        }
    }
    for _ in 0..cfg.background_strokes {
        if let Some(stroke) = background_stroke(cfg, &objects, rng) {
            annotations.negative_scribbles.push(stroke);
        }
    }
    Ok(SyntheticScene { objects, image, annotations })
}

/// Three parallel strokes along the contact chord of a pair,
/// perpendicular to the line joining the centres.
fn contact_strokes(a: &SceneObject, b: &SceneObject, cfg: &SceneConfig) -> Vec<Vec<Pixel>> {
    let (ar, ac) = (a.center.0 as f64, a.center.1 as f64);
    let (br, bc) = (b.center.0 as f64, b.center.1 as f64);
    // point on the centre line where the two boundaries are equidistant
    let d = dist(a.center, b.center).max(1e-9);
    let t = ((d + a.radius - b.radius) / 2.0 / d).clamp(0.0, 1.0);
    let (mr, mc) = (ar + t * (br - ar), ac + t * (bc - ac));
    let (nr, nc) = ((br - ar) / d, (bc - ac) / d);
    let (ur, uc) = (nc, -nr);
    // cover the whole chord where the disks meet, plus a margin
    let half = (a.radius * a.radius - (t * d).powi(2)).max(0.0).sqrt() + 6.0;
    let clamp = |v: f64, n: usize| v.round().clamp(0.0, (n - 1) as f64) as usize;
    [-1.0, 0.0, 1.0]
        .iter()
        .map(|&off| {
            let (r0, c0) = (mr + off * nr, mc + off * nc);
            vec![
                (clamp(r0 - half * ur, cfg.height), clamp(c0 - half * uc, cfg.width)),
                (clamp(r0 + half * ur, cfg.height), clamp(c0 + half * uc, cfg.width)),
            ]
        })
        .collect()
}

fn background_stroke<R: Rng + ?Sized>(cfg: &SceneConfig, objects: &[SceneObject], rng: &mut R) -> Option<Vec<Pixel>> {
    let len = 16.0;
    for _ in 0..200 {
        let start = (rng.gen_range(0.0..cfg.height as f64), rng.gen_range(0.0..cfg.width as f64));
        let theta = rng.gen_range(0.0..2.0 * PI);
        let end = (start.0 + len * theta.sin(), start.1 + len * theta.cos());
        if end.0 < 0.0 || end.1 < 0.0 || end.0 > (cfg.height - 1) as f64 || end.1 > (cfg.width - 1) as f64 {
            continue;
        }
        let far = |p: (f64, f64)| {
            objects.iter().all(|o| {
                let (dr, dc) = (p.0 - o.center.0 as f64, p.1 - o.center.1 as f64);
                (dr * dr + dc * dc).sqrt() > o.radius + 8.0
            })
        };
        let mid = ((start.0 + end.0) / 2.0, (start.1 + end.1) / 2.0);
        if far(start) && far(end) && far(mid) {
            let px = |p: (f64, f64)| (p.0.round() as usize, p.1.round() as usize);
            return Some(vec![px(start), px(end)]);
        }
    }
    None
}

/// Coverage in `[0, 1]` of pixel `(r, c)` by an object, with a one-pixel
/// soft edge.
fn coverage(o: &SceneObject, wobble: &[(f64, f64)], r: f64, c: f64) -> f64 {
    let (dr, dc) = (r - o.center.0 as f64, c - o.center.1 as f64);
    match o.kind {
        ObjectKind::ElongatedDistractor => {
            let (s, co) = o.angle.sin_cos();
            let u = dc * co + dr * s;
            let v = -dc * s + dr * co;
            let q = ((u / o.radius).powi(2) + (v / o.minor).powi(2)).sqrt();
            ((1.0 - q) * o.minor + 0.5).clamp(0.0, 1.0)
        }
        _ => {
            let d = (dr * dr + dc * dc).sqrt();
            let phi = dr.atan2(dc);
            let edge = o.radius * (1.0 + wobble.iter().enumerate().map(|(k, (a, p))| a * ((k as f64 + 3.0) * phi + p).sin()).sum::<f64>());
            (edge - d + 0.5).clamp(0.0, 1.0)
        }
    }
}

fn render<R: Rng + ?Sized>(cfg: &SceneConfig, objects: &[SceneObject], rng: &mut R) -> RgbImage {
    let (h, w) = (cfg.height, cfg.width);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let waves: Vec<(f64, f64, f64)> =
        (0..3).map(|_| (rng.gen_range(0.02..0.08), rng.gen_range(0.02..0.08), rng.gen_range(0.0..2.0 * PI))).collect();
    let wobbles: Vec<Vec<(f64, f64)>> = objects
        .iter()
        .map(|_| (0..2).map(|_| (rng.gen_range(0.0..0.05), rng.gen_range(0.0..2.0 * PI))).collect())
        .collect();
    let styles: Vec<([f64; 3], f64)> = objects
        .iter()
        .map(|o| {
            let jitter = rng.gen_range(-12.0..12.0);
            match o.kind {
                ObjectKind::Lymphocyte => ([70.0 + jitter, 40.0 + jitter, 125.0 + jitter], 10.0),
                ObjectKind::PaleDistractor => ([180.0 + jitter, 135.0 + jitter, 195.0 + jitter], 8.0),
                ObjectKind::ElongatedDistractor => ([135.0 + jitter, 80.0 + jitter, 160.0 + jitter], 8.0),
            }
        })
        .collect();

    let mut img = RgbImage::new(h, w).expect("checked dims");
    for r in 0..h {
        for c in 0..w {
            let (rf, cf) = (r as f64, c as f64);
            let shade: f64 = waves.iter().map(|(fr, fc, p)| (fr * rf + fc * cf + p).sin()).sum::<f64>() * 6.0;
            let n = noise.sample(rng) * 6.0;
            let mut px = [232.0 + shade + n, 178.0 + shade + n, 205.0 + shade * 0.5 + n];
            for (i, o) in objects.iter().enumerate() {
                let reach = o.radius * 1.2 + 1.0;
                if (rf - o.center.0 as f64).abs() > reach || (cf - o.center.1 as f64).abs() > reach {
                    continue;
                }
                let a = coverage(o, &wobbles[i], rf, cf);
                if a > 0.0 {
                    let (color, sigma) = styles[i];
                    let m = noise.sample(rng) * sigma;
                    for k in 0..3 {
                        px[k] = (1.0 - a) * px[k] + a * (color[k] + m);
                    }
                }
            }
            img.set(r, c, px.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(cfg: SceneConfig, seed: u64) -> Result<SyntheticScene> {
        generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn pairwise(points: &[Pixel]) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                out.push(dist(points[i], points[j]));
            }
        }
        out
    }

    #[test]
    fn no_lymphocytes_no_positive_points() {
        let s = scene(SceneConfig { lymphocytes: 0, ..Default::default() }, 1).unwrap();
        assert!(s.annotations.positive_points.is_empty());
        assert_eq!(s.annotations.negative_points.len(), 3);
    }

    #[test]
    fn isolated_lymphocytes_are_spaced() {
        for seed in 0..5 {
            let s = scene(SceneConfig { height: 320, width: 320, lymphocytes: 10, distractors: 2, ..Default::default() }, seed).unwrap();
            assert_eq!(s.annotations.positive_points.len(), 10);
            assert!(pairwise(&s.annotations.positive_points).iter().all(|&d| d >= 50.0));
        }
    }

    #[test]
    fn clustering_creates_proximal_pairs() {
        for seed in 0..5 {
            let s = scene(SceneConfig { lymphocytes: 6, clustering: 1.0, ..Default::default() }, seed).unwrap();
            assert_eq!(s.annotations.positive_points.len(), 6);
            assert!(pairwise(&s.annotations.positive_points).iter().any(|&d| d < 30.0));
            assert_eq!(s.annotations.negative_scribbles.len() - 4, 3 * 3);
        }
    }

    #[test]
    fn objects_respect_radius_and_margin() {
        let s = scene(SceneConfig { lymphocytes: 8, distractors: 4, clustering: 0.5, ..Default::default() }, 7).unwrap();
        for o in &s.objects {
            assert!((MIN_RADIUS..=MAX_RADIUS).contains(&o.radius));
            let m = o.radius.max(BORDER_MARGIN);
            assert!(o.center.0 as f64 >= m && o.center.1 as f64 >= m);
            assert!(o.center.0 as f64 <= 255.0 - m && o.center.1 as f64 <= 255.0 - m);
        }
        s.annotations.check_bounds(256, 256).unwrap();
    }

    #[test]
    fn lymphocytes_render_dark() {
        let s = scene(SceneConfig::default(), 3).unwrap();
        for (r, c) in s.annotations.positive_points.iter().copied() {
            let px = s.image.get(r, c);
            assert!(px[0] < 130 && px[1] < 100, "{px:?}");
        }
    }

    #[test]
    fn deterministic_and_infeasible() {
        let a = scene(SceneConfig::default(), 11).unwrap();
        let b = scene(SceneConfig::default(), 11).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.annotations, b.annotations);
        let crowded = SceneConfig { height: 64, width: 64, lymphocytes: 20, ..Default::default() };
        assert!(matches!(scene(crowded, 1), Err(Error::Infeasible(_))));
    }
}
