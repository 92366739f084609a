//! Flat on-disk storage for the service.
//!
//! ```text
//! <root>/images/<id>.png             uploaded field of view
//! <root>/images/<id>.norm.png        stain-normalised copy
//! <root>/corrections.jsonl           append-only correction log
//! <root>/consumed.jsonl              append-only consumption marks
//! <root>/detections/<id>/<model>.json
//! <root>/detections/<id>/<model>.prob.png
//! <root>/models/                     registry and checkpoints
//! ```

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::Context;
use lymphdet_core::annotation::{AnnotationKind, AnnotationRecord, AnnotationSet, AnnotationSource};
use lymphdet_core::postprocess::Detection;
use lymphdet_core::raster::RgbImage;
use lymphdet_core::stain::{normalize, StainReference};
use serde::{Deserialize, Serialize};

/// A stored correction. `consumed_by_model_id` is filled from the
/// consumption log when reading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub id: u64,
    pub fov_id: String,
    pub kind: AnnotationKind,
    pub points: Vec<[usize; 2]>,
    #[serde(default)]
    pub author: Option<String>,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumed_by_model_id: Option<String>,
}

impl CorrectionRecord {
    pub fn to_annotation(&self) -> AnnotationRecord {
        AnnotationRecord {
            fov_id: self.fov_id.clone(),
            kind: self.kind,
            points: self.points.clone(),
            timestamp: Some(self.timestamp.to_string()),
            author: self.author.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ConsumptionMark {
    correction_id: u64,
    model_id: String,
}

/// Detections of one model on one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredDetections {
    pub image_id: String,
    pub model_id: String,
    pub threshold: f32,
    pub detections: Vec<Detection>,
}

pub struct Store {
    root: PathBuf,
    log_lock: Mutex<()>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&buf)?;
    f.sync_data()?;
    Ok(())
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> anyhow::Result<Self> {
        let root = root.into();
        for sub in ["images", "detections", "models"] {
            fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        Ok(Self { root, log_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    /// Decode and store an uploaded PNG under a fresh id.
    pub fn put_image(&self, png: &[u8]) -> anyhow::Result<(String, RgbImage)> {
        let image = RgbImage::decode_png(png)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        image.save_png(self.image_path(&id))?;
        Ok((id, image))
    }

    pub fn has_image(&self, id: &str) -> bool {
        valid_id(id) && self.image_path(id).exists()
    }

    pub fn image(&self, id: &str) -> anyhow::Result<RgbImage> {
        anyhow::ensure!(valid_id(id), "bad image id");
        Ok(RgbImage::load_png(self.image_path(id))?)
    }

    pub fn image_png(&self, id: &str) -> anyhow::Result<Vec<u8>> {
        anyhow::ensure!(valid_id(id), "bad image id");
        Ok(fs::read(self.image_path(id))?)
    }

    pub fn image_ids(&self) -> anyhow::Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join("images"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_suffix(".png").filter(|s| !s.ends_with(".norm")).map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Stain-normalised copy, computed once and cached beside the original.
    pub fn normalized_image(&self, id: &str, reference: Option<&StainReference>) -> anyhow::Result<RgbImage> {
        let Some(reference) = reference else { return self.image(id) };
        let cached = self.root.join("images").join(format!("{id}.norm.png"));
        if cached.exists() {
            return Ok(RgbImage::load_png(&cached)?);
        }
        let norm = normalize(&self.image(id)?, reference)?;
        norm.save_png(&cached)?;
        Ok(norm)
    }

    /// Append corrections, assigning consecutive ids.
    pub fn append_corrections(&self, records: &[AnnotationRecord]) -> anyhow::Result<Vec<CorrectionRecord>> {
        let _guard = self.log_lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.root.join("corrections.jsonl");
        let next = read_jsonl::<CorrectionRecord>(&path)?.last().map_or(0, |r| r.id + 1);
        let now = crate::registry::now_secs();
        let stored: Vec<CorrectionRecord> = records
            .iter()
            .enumerate()
            .map(|(i, r)| CorrectionRecord {
                id: next + i as u64,
                fov_id: r.fov_id.clone(),
                kind: r.kind,
                points: r.points.clone(),
                author: r.author.clone(),
                timestamp: now,
                consumed_by_model_id: None,
            })
            .collect();
        append_jsonl(&path, &stored)?;
        Ok(stored)
    }

    /// Every correction, with consumption marks applied.
    pub fn corrections(&self) -> anyhow::Result<Vec<CorrectionRecord>> {
        let _guard = self.log_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut records: Vec<CorrectionRecord> = read_jsonl(&self.root.join("corrections.jsonl"))?;
        let marks: HashMap<u64, String> = read_jsonl::<ConsumptionMark>(&self.root.join("consumed.jsonl"))?
            .into_iter()
            .map(|m| (m.correction_id, m.model_id))
            .collect();
        for r in &mut records {
            r.consumed_by_model_id = marks.get(&r.id).cloned();
        }
        Ok(records)
    }

    pub fn unconsumed(&self) -> anyhow::Result<Vec<CorrectionRecord>> {
        Ok(self.corrections()?.into_iter().filter(|r| r.consumed_by_model_id.is_none()).collect())
    }

    pub fn mark_consumed(&self, ids: &[u64], model_id: &str) -> anyhow::Result<()> {
        let _guard = self.log_lock.lock().unwrap_or_else(|e| e.into_inner());
        let marks: Vec<ConsumptionMark> =
            ids.iter().map(|&correction_id| ConsumptionMark { correction_id, model_id: model_id.to_string() }).collect();
        append_jsonl(&self.root.join("consumed.jsonl"), &marks)
    }

    /// All corrections of one field of view as an annotation set.
    pub fn annotation_set(&self, fov_id: &str) -> anyhow::Result<AnnotationSet> {
        let mut set = AnnotationSet::new(fov_id);
        set.source = AnnotationSource::Correction;
        for r in self.corrections()?.iter().filter(|r| r.fov_id == fov_id) {
            set.push(&r.to_annotation())?;
        }
        Ok(set)
    }

    fn detection_paths(&self, image_id: &str, model_id: &str) -> (PathBuf, PathBuf) {
        let dir = self.root.join("detections").join(image_id);
        (dir.join(format!("{model_id}.json")), dir.join(format!("{model_id}.prob.png")))
    }

    pub fn probability_png_path(&self, image_id: &str, model_id: &str) -> Option<PathBuf> {
        (valid_id(image_id) && valid_id(model_id)).then(|| self.detection_paths(image_id, model_id).1)
    }

    pub fn load_detections(&self, image_id: &str, model_id: &str) -> anyhow::Result<Option<StoredDetections>> {
        let (json, _) = self.detection_paths(image_id, model_id);
        if !json.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(json)?)?))
    }

    pub fn save_detections(
        &self,
        stored: &StoredDetections,
        probabilities: &lymphdet_core::model::ProbabilityMap,
    ) -> anyhow::Result<()> {
        let (json, png) = self.detection_paths(&stored.image_id, &stored.model_id);
        fs::create_dir_all(json.parent().expect("has parent"))?;
        probabilities.save_png(&png)?;
        let tmp = json.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(stored)?)?;
        fs::rename(tmp, json)?;
        Ok(())
    }
}
