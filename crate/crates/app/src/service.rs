//! Service state and operations behind the HTTP API and the CLI: the store,
//! the registry with its active model, correction intake and the
//! correction-driven fine-tuning job.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use anyhow::{anyhow, Context};
use log::{error, info, warn};
use lymphdet_core::annotation::{AnnotationKind, AnnotationRecord};
use lymphdet_core::checkpoint;
use lymphdet_core::model::{predict, ModelParams, ProbabilityMap};
use lymphdet_core::postprocess::{calibrate_threshold, detect, threshold_grid, PostprocessConfig};
use lymphdet_core::trainer::{finetune, FineTuneJob, TrainingSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::config::AppConfig;
use crate::dataset;
use crate::registry::{now_secs, ModelRegistryEntry, ModelStatus, Registry, RegistryManifest};
use crate::store::{CorrectionRecord, Store, StoredDetections};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldError {
    pub index: usize,
    pub field: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("invalid request")]
    BadRequest(Vec<FieldError>),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

pub type ServiceResult<T> = Result<T, ServiceError>;

pub struct LoadedModel {
    pub entry: ModelRegistryEntry,
    pub params: ModelParams,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct JobStatus {
    pub running: bool,
    pub current_child: Option<String>,
    pub completed_rounds: usize,
    pub last_error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrectionReceipt {
    pub accepted: usize,
    pub unconsumed: usize,
    pub finetune_triggered: bool,
}

pub struct Service {
    pub store: Store,
    config: AppConfig,
    registry: Mutex<Registry>,
    active: RwLock<Option<Arc<LoadedModel>>>,
    job: Mutex<JobStatus>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Service {
    /// Open the data directory. If the registry is empty and the config
    /// names a checkpoint, that checkpoint becomes the first active model.
    pub fn open(config: AppConfig) -> anyhow::Result<Arc<Self>> {
        let store = Store::open(&config.service.data_dir)?;
        let registry = Registry::open(&store.models_dir())?;
        let svc = Arc::new(Self {
            store,
            config,
            registry: Mutex::new(registry),
            active: RwLock::new(None),
            job: Mutex::new(JobStatus::default()),
        });
        let empty = lock(&svc.registry).manifest().entries.is_empty();
        if empty {
            if let Some(path) = svc.config.service.model.clone() {
                let params = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
                svc.register_model(params, None)?;
            }
        }
        svc.reload_active()?;
        // a job interrupted by a restart leaves an unfinished entry behind
        let mut reg = lock(&svc.registry);
        let stale: Vec<String> = reg
            .manifest()
            .entries
            .iter()
            .filter(|e| e.status != ModelStatus::Ready)
            .map(|e| e.model_id.clone())
            .collect();
        for id in &stale {
            warn!("dropping unfinished model {id}");
            reg.remove(id);
        }
        if !stale.is_empty() {
            reg.save()?;
        }
        drop(reg);
        Ok(svc)
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    fn reload_active(&self) -> anyhow::Result<()> {
        let entry = lock(&self.registry).active().cloned();
        let loaded = match entry {
            Some(entry) => {
                let params = checkpoint::load(&entry.checkpoint)?;
                Some(Arc::new(LoadedModel { entry, params }))
            }
            None => None,
        };
        *self.active.write().unwrap_or_else(|e| e.into_inner()) = loaded;
        Ok(())
    }

    pub fn active_model(&self) -> Option<Arc<LoadedModel>> {
        self.active.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Copy `params` into the registry as a ready model and make it active.
    pub fn register_model(&self, mut params: ModelParams, parent_id: Option<String>) -> anyhow::Result<ModelRegistryEntry> {
        let entry = {
            let mut reg = lock(&self.registry);
            let model_id = reg.next_id();
            let dir = reg.checkpoint_dir(&model_id);
            params.meta.model_id = Some(model_id.clone());
            params.meta.parent_id = parent_id.clone();
            checkpoint::save(&params, &dir)?;
            let entry = ModelRegistryEntry {
                model_id: model_id.clone(),
                parent_id,
                checkpoint: dir,
                threshold: params.meta.threshold,
                created: now_secs(),
                status: ModelStatus::Ready,
            };
            reg.register(entry.clone())?;
            reg.activate(&model_id)?;
            reg.save()?;
            entry
        };
        *self.active.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(LoadedModel { entry: entry.clone(), params }));
        Ok(entry)
    }

    pub fn models(&self) -> RegistryManifest {
        lock(&self.registry).manifest().clone()
    }

    pub fn job_status(&self) -> JobStatus {
        lock(&self.job).clone()
    }

    fn require_image(&self, image_id: &str) -> ServiceResult<()> {
        if self.store.has_image(image_id) {
            Ok(())
        } else {
            Err(ServiceError::NotFound(format!("no image {image_id}")))
        }
    }

    /// Detections of the active model on an image, computed once per
    /// (image, model) pair and persisted.
    pub fn detect(&self, image_id: &str) -> ServiceResult<StoredDetections> {
        self.require_image(image_id)?;
        let model = self.active_model().ok_or_else(|| ServiceError::Conflict("no ready model".into()))?;
        let model_id = &model.entry.model_id;
        if let Some(stored) = self.store.load_detections(image_id, model_id)? {
            return Ok(stored);
        }
        let image = self.store.normalized_image(image_id, model.params.meta.stain.as_ref())?;
        let probs = predict(&model.params, &image).map_err(anyhow::Error::from)?;
        let config = PostprocessConfig::with_threshold(model.entry.threshold);
        let detections = detect(&probs, &config).map_err(anyhow::Error::from)?;
        let stored = StoredDetections {
            image_id: image_id.to_string(),
            model_id: model_id.clone(),
            threshold: model.entry.threshold,
            detections,
        };
        self.store.save_detections(&stored, &probs)?;
        Ok(stored)
    }

    /// Validate wire records (a single object or an array) for one image.
    pub fn parse_corrections(&self, image_id: &str, body: &Value) -> ServiceResult<Vec<AnnotationRecord>> {
        self.require_image(image_id)?;
        let image = self.store.image(image_id)?;
        let items: Vec<&Value> = match body {
            Value::Array(items) => items.iter().collect(),
            other => vec![other],
        };
        let mut errors = Vec::new();
        let mut records = Vec::new();
        if items.is_empty() {
            errors.push(FieldError { index: 0, field: "body".into(), message: "no annotations".into() });
        }
        for (index, item) in items.into_iter().enumerate() {
            let mut err = |field: &str, message: String| errors.push(FieldError { index, field: field.into(), message });
            let Some(obj) = item.as_object() else {
                err("body", "annotation must be an object".into());
                continue;
            };
            match obj.get("fov_id").and_then(Value::as_str) {
                Some(id) if id == image_id => {}
                Some(id) => err("fov_id", format!("{id} does not match image {image_id}")),
                None => err("fov_id", "missing or not a string".into()),
            }
            let kind = match obj.get("kind").map(|k| serde_json::from_value::<AnnotationKind>(k.clone())) {
                Some(Ok(kind)) => Some(kind),
                _ => {
                    err("kind", "must be one of PP, PS, NP, NS".into());
                    None
                }
            };
            let mut points = Vec::new();
            match obj.get("points").and_then(Value::as_array) {
                None => err("points", "missing or not an array".into()),
                Some(list) => {
                    for (j, p) in list.iter().enumerate() {
                        let pair = p.as_array().filter(|a| a.len() == 2).and_then(|a| Some([a[0].as_u64()?, a[1].as_u64()?]));
                        match pair {
                            Some([r, c]) if (r as usize) < image.height() && (c as usize) < image.width() => {
                                points.push([r as usize, c as usize])
                            }
                            Some([r, c]) => err(
                                "points",
                                format!("point {j} ({r}, {c}) outside {}x{} image", image.height(), image.width()),
                            ),
                            None => err("points", format!("point {j} is not a [row, col] pair of non-negative integers")),
                        }
                    }
                    if list.is_empty() {
                        err("points", "needs at least one point".into());
                    }
                }
            }
            if let Some(kind) = kind {
                if kind.is_point() && points.len() > 1 {
                    err("points", format!("{} annotations carry exactly one point", kind_code(kind)));
                }
            }
            let author = match obj.get("author") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(_) => {
                    err("author", "must be a string".into());
                    None
                }
            };
            if let Some(kind) = kind {
                records.push(AnnotationRecord { fov_id: image_id.to_string(), kind, points, timestamp: None, author });
            }
        }
        if errors.is_empty() {
            Ok(records)
        } else {
            Err(ServiceError::BadRequest(errors))
        }
    }

    /// Store corrections and start a fine-tuning round when the unconsumed
    /// count reaches the trigger.
    pub fn add_corrections(self: &Arc<Self>, records: &[AnnotationRecord]) -> ServiceResult<CorrectionReceipt> {
        self.store.append_corrections(records)?;
        let unconsumed = self.store.unconsumed()?.len();
        let finetune_triggered = self.maybe_start_job(false)?;
        Ok(CorrectionReceipt { accepted: records.len(), unconsumed, finetune_triggered })
    }

    /// Start a background fine-tuning round if none is running and there
    /// are enough unconsumed corrections (any, when `force`).
    pub fn maybe_start_job(self: &Arc<Self>, force: bool) -> ServiceResult<bool> {
        let unconsumed = self.store.unconsumed()?.len();
        let needed = if force { 1 } else { self.config.service.finetune_trigger.max(1) };
        let mut job = lock(&self.job);
        if job.running || unconsumed < needed || self.active_model().is_none() {
            return Ok(false);
        }
        job.running = true;
        drop(job);
        let svc = Arc::clone(self);
        std::thread::spawn(move || {
            let result = svc.run_finetune();
            {
                let mut job = lock(&svc.job);
                job.running = false;
                job.current_child = None;
                match &result {
                    Ok(entry) => {
                        job.completed_rounds += 1;
                        job.last_error = None;
                        info!("fine-tuning produced {} (threshold {})", entry.model_id, entry.threshold);
                    }
                    Err(e) => {
                        error!("fine-tuning failed: {e:#}");
                        job.last_error = Some(format!("{e:#}"));
                    }
                }
            }
            // corrections that arrived during the round may already
            // exceed the trigger again
            if result.is_ok() {
                if let Err(e) = svc.maybe_start_job(false) {
                    error!("could not restart fine-tuning: {e}");
                }
            }
        });
        Ok(true)
    }

    /// Prior training data: the configured prior directory plus fields of
    /// view whose corrections were consumed by earlier rounds.
    fn prior_samples(&self, params: &ModelParams, exclude: &BTreeSet<String>) -> anyhow::Result<Vec<TrainingSample>> {
        let stain = params.meta.stain.as_ref();
        let mut samples = Vec::new();
        if let Some(dir) = &self.config.service.prior_dir {
            let items = dataset::load_dir(dir)?;
            samples.extend(dataset::to_samples(&items, self.config.r1, stain)?);
        }
        let corrected: BTreeSet<String> = self
            .store
            .corrections()?
            .into_iter()
            .filter(|r| r.consumed_by_model_id.is_some())
            .map(|r| r.fov_id)
            .collect();
        for fov in corrected.difference(exclude) {
            samples.push(self.correction_sample(fov, params)?);
        }
        samples.retain(|s| !exclude.contains(&s.fov_id));
        Ok(samples)
    }

    fn correction_sample(&self, fov_id: &str, params: &ModelParams) -> anyhow::Result<TrainingSample> {
        let image = self.store.normalized_image(fov_id, params.meta.stain.as_ref())?;
        let annotations = self.store.annotation_set(fov_id)?;
        Ok(TrainingSample::from_annotations(&image, &annotations, self.config.r1, None)?)
    }

    /// One fine-tuning round on the current unconsumed corrections. Runs on
    /// the calling thread; the active model keeps serving until the child is
    /// registered.
    pub fn run_finetune(&self) -> anyhow::Result<ModelRegistryEntry> {
        let parent = self.active_model().ok_or_else(|| anyhow!("no active model to fine-tune"))?;
        let snapshot: Vec<CorrectionRecord> = self.store.unconsumed()?;
        anyhow::ensure!(!snapshot.is_empty(), "no unconsumed corrections");
        let fovs: BTreeSet<String> = snapshot.iter().map(|r| r.fov_id.clone()).collect();
        let corrections: Vec<TrainingSample> =
            fovs.iter().map(|f| self.correction_sample(f, &parent.params)).collect::<anyhow::Result<_>>()?;
        let prior = self.prior_samples(&parent.params, &fovs)?;

        let (child_id, child_dir, round) = {
            let mut reg = lock(&self.registry);
            let child_id = reg.next_id();
            let dir = reg.checkpoint_dir(&child_id);
            let round = reg.manifest().entries.len() as u64;
            reg.register(ModelRegistryEntry {
                model_id: child_id.clone(),
                parent_id: Some(parent.entry.model_id.clone()),
                checkpoint: dir.clone(),
                threshold: parent.entry.threshold,
                created: now_secs(),
                status: ModelStatus::Finetuning,
            })?;
            reg.save()?;
            (child_id, dir, round)
        };
        lock(&self.job).current_child = Some(child_id.clone());
        info!(
            "fine-tuning {} -> {child_id} on {} corrections over {} fields of view",
            parent.entry.model_id,
            snapshot.len(),
            fovs.len()
        );

        let result = self.train_child(&parent, corrections, &prior, &child_id, &child_dir, round);
        let mut reg = lock(&self.registry);
        match result {
            Ok(child) => {
                let threshold = child.meta.threshold;
                reg.update(&child_id, |e| {
                    e.status = ModelStatus::Ready;
                    e.threshold = threshold;
                })?;
                reg.activate(&child_id)?;
                reg.save()?;
                let entry = reg.get(&child_id).cloned().expect("just registered");
                *self.active.write().unwrap_or_else(|e| e.into_inner()) =
                    Some(Arc::new(LoadedModel { entry: entry.clone(), params: child }));
                drop(reg);
                let ids: Vec<u64> = snapshot.iter().map(|r| r.id).collect();
                self.store.mark_consumed(&ids, &child_id)?;
                Ok(entry)
            }
            Err(e) => {
                reg.remove(&child_id);
                reg.save()?;
                if child_dir.exists() {
                    let _ = std::fs::remove_dir_all(&child_dir);
                }
                Err(e)
            }
        }
    }

    fn train_child(
        &self,
        parent: &LoadedModel,
        corrections: Vec<TrainingSample>,
        prior: &[TrainingSample],
        child_id: &str,
        child_dir: &Path,
        round: u64,
    ) -> anyhow::Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.finetune.seed.wrapping_add(round));
        let job = FineTuneJob::assemble(corrections, prior, &mut rng)?;
        let mut cfg = self.config.finetune.clone();
        cfg.seed = cfg.seed.wrapping_add(round);
        let mut base = parent.params.clone();
        base.meta.model_id = Some(parent.entry.model_id.clone());
        let outcome = finetune(&base, &job, &cfg)?;
        let mut child = outcome.best;
        child.meta.model_id = Some(child_id.to_string());
        child.meta.parent_id = Some(parent.entry.model_id.clone());

        // reference images: the old training images of this round
        let mut references: Vec<&TrainingSample> = job.replay.iter().chain(&job.validation).collect();
        if references.is_empty() {
            references = job.corrections.iter().collect();
        }
        let maps = |p: &ModelParams| -> anyhow::Result<Vec<ProbabilityMap>> {
            references.iter().map(|s| Ok(predict(p, &s.image)?)).collect()
        };
        let threshold = calibrate_threshold(&maps(&base)?, &maps(&child)?, parent.entry.threshold, &threshold_grid())?;
        child.meta.threshold = threshold;
        checkpoint::save(&child, child_dir)?;
        Ok(child)
    }
}

fn kind_code(kind: AnnotationKind) -> &'static str {
    match kind {
        AnnotationKind::PositivePoint => "PP",
        AnnotationKind::PositiveScribble => "PS",
        AnnotationKind::NegativePoint => "NP",
        AnnotationKind::NegativeScribble => "NS",
    }
}
