//! Momentum SGD training with epoch-wise validation and early stopping,
//! and the correction-driven fine-tuning protocol built on top of it.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{compile_maps, AnnotationSet, LabelMap, WeightMap};
use crate::augment::{sample_patch, DEFAULT_PATCH_SIZE};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::loss::{weighted_cross_entropy, DEFAULT_WEIGHT_DECAY};
use crate::model::{forward_eval, image_tensor, loss_and_gradients, Gradients, Mode, ModelParams};
use crate::raster::RgbImage;
use crate::stain::{normalize, StainReference};
use crate::tensor::Scalar;

/// Epochs `first..=last` use `(learning_rate, momentum)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub first: usize,
    pub last: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// Piecewise-constant learning rate and momentum. Epochs past the last row
/// keep the last row's values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ScheduleRow>", into = "Vec<ScheduleRow>")]
pub struct Schedule {
    rows: Vec<ScheduleRow>,
}

impl Schedule {
    pub fn new(rows: Vec<ScheduleRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("schedule needs at least one row".into()));
        }
        let mut next = 1;
        for r in &rows {
            if r.first != next || r.last < r.first {
                return Err(Error::Config(format!("schedule rows must be contiguous from epoch 1 (row {}-{})", r.first, r.last)));
            }
            if !(r.learning_rate > 0.0 && r.learning_rate.is_finite()) || !(0.0..1.0).contains(&r.momentum) {
                return Err(Error::Config(format!(
                    "bad schedule row: rate {} momentum {}",
                    r.learning_rate, r.momentum
                )));
            }
            next = r.last + 1;
        }
        Ok(Self { rows })
    }

    /// A single row covering every epoch.
    pub fn constant(learning_rate: f64, momentum: f64) -> Result<Self> {
        Self::new(vec![ScheduleRow { first: 1, last: 1, learning_rate, momentum }])
    }

    pub fn rows(&self) -> &[ScheduleRow] {
        &self.rows
    }

    /// Same breakpoints with every learning rate multiplied by `factor`.
    pub fn with_rate_factor(&self, factor: f64) -> Result<Self> {
        Self::new(self.rows.iter().map(|r| ScheduleRow { learning_rate: r.learning_rate * factor, ..*r }).collect())
    }

    /// `(learning_rate, momentum)` for a 1-based epoch.
    pub fn lookup(&self, epoch: usize) -> Result<(f64, f64)> {
        if epoch < 1 {
            return Err(Error::InvalidInput("epochs are numbered from 1".into()));
        }
        let row = self.rows.iter().find(|r| epoch <= r.last).unwrap_or_else(|| self.rows.last().expect("non-empty"));
        Ok((row.learning_rate, row.momentum))
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(vec![
            ScheduleRow { first: 1, last: 50, learning_rate: 1e-4, momentum: 0.9 },
            ScheduleRow { first: 51, last: 120, learning_rate: 1e-5, momentum: 0.99 },
            ScheduleRow { first: 121, last: 200, learning_rate: 1e-6, momentum: 0.999 },
        ])
        .expect("valid table")
    }
}

impl TryFrom<Vec<ScheduleRow>> for Schedule {
    type Error = Error;
    fn try_from(rows: Vec<ScheduleRow>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<Schedule> for Vec<ScheduleRow> {
    fn from(s: Schedule) -> Self {
        s.rows
    }
}

/// One stain-normalised field of view with its compiled maps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub fov_id: String,
    pub image: RgbImage,
    pub labels: LabelMap,
    pub weights: WeightMap,
}

impl TrainingSample {
    /// Normalise (when a reference is given) and compile annotations.
    pub fn from_annotations(
        image: &RgbImage,
        annotations: &AnnotationSet,
        r1: f64,
        stain: Option<&StainReference>,
    ) -> Result<Self> {
        let image = match stain {
            Some(reference) => normalize(image, reference)?,
            None => image.clone(),
        };
        let (labels, weights) = compile_maps(annotations, image.height(), image.width(), r1)?;
        Ok(Self { fov_id: annotations.fov_id.clone(), image, labels, weights })
    }

    fn has_labels(&self) -> bool {
        self.labels.as_slice().iter().any(|&l| l != 0)
    }
}

/// Training and validation fields of view from one dataset.
#[derive(Clone, Debug, Default)]
pub struct DataSource {
    pub name: String,
    pub training: Vec<TrainingSample>,
    pub validation: Vec<TrainingSample>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub train_epoch_size: usize,
    pub val_epoch_size: usize,
    pub patch_size: usize,
    /// Stop once validation has not improved for more than this many epochs.
    pub patience: usize,
    /// Required decrease of validation loss to count as an improvement.
    pub min_delta: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// JSON-lines loss curve.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            train_epoch_size: 175,
            val_epoch_size: 25,
            patch_size: DEFAULT_PATCH_SIZE,
            patience: 20,
            min_delta: 0.0,
            schedule: Schedule::default(),
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
            checkpoint_dir: None,
            checkpoint_every: 10,
            log_path: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode data loss over the epoch's iterations.
    pub train_loss: f64,
    /// Mean eval-mode data loss over the validation patches.
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// Mutable optimiser state.
#[derive(Clone, Debug)]
pub struct TrainState<T = f32> {
    pub params: ModelParams<T>,
    pub velocity: Gradients<T>,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_params: ModelParams<T>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub rng: ChaCha8Rng,
    pub toggle: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ModelParams<T>, seed: u64) -> Self {
        let velocity = zeros_like(&params);
        Self {
            best_params: params.clone(),
            params,
            velocity,
            epoch: 0,
            best_val: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            toggle: 0,
        }
    }
}

/// Result of a training or fine-tuning run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the last ones when no
    /// validation data was available).
    pub best: ModelParams,
    /// Parameters after the final update.
    pub last: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Fields of view drawn for training patches.
    pub seen_fovs: BTreeSet<String>,
    /// Largest absolute gradient component over all updates.
    pub max_gradient: f64,
    pub iterations: usize,
}

pub fn zeros_like<T: Scalar>(params: &ModelParams<T>) -> Gradients<T> {
    Gradients {
        layers: params
            .layers
            .iter()
            .map(|l| (vec![T::zero(); l.weight.len()], vec![T::zero(); l.bias.len()]))
            .collect(),
    }
}

/// Classical momentum: `v ← μv − η∇`, `θ ← θ + v`.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    velocity: &mut Gradients<T>,
    grads: &Gradients<T>,
    learning_rate: f64,
    momentum: f64,
) {
    let (lr, mu) = (T::from_f64(learning_rate), T::from_f64(momentum));
    for ((layer, vel), g) in params.layers.iter_mut().zip(&mut velocity.layers).zip(&grads.layers) {
        let pairs = layer.weight.iter_mut().zip(&mut vel.0).zip(&g.0).chain(layer.bias.iter_mut().zip(&mut vel.1).zip(&g.1));
        for ((p, v), &gi) in pairs {
            *v = mu * *v - lr * gi;
            *p = *p + *v;
        }
    }
}

const VALIDATION_STREAM: u64 = 0x5eed_0fa1;

/// Mean eval-mode data loss over `count` patches drawn alternately from the
/// given pools with a fixed seed, so successive epochs see the same patches.
pub fn validation_loss(
    params: &ModelParams,
    pools: &[&[TrainingSample]],
    count: usize,
    patch_size: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let pools: Vec<&[TrainingSample]> = pools.iter().copied().filter(|p| p.iter().any(|s| s.has_labels())).collect();
    if pools.is_empty() || count == 0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_STREAM);
    let mut total = 0.0;
    for i in 0..count {
        let sample = pick(pools[i % pools.len()], &mut rng);
        let patch = sample_patch(&sample.image, &sample.labels, &sample.weights, patch_size, &mut rng)?;
        let probs = forward_eval(params, &image_tensor(&patch.image))?;
        total += weighted_cross_entropy(&probs, &patch.labels, &patch.weights)?;
    }
    Ok(Some(total / count as f64))
}

fn pick<'a, R: Rng>(pool: &'a [TrainingSample], rng: &mut R) -> &'a TrainingSample {
    // fields of view without labels cannot anchor a patch
    loop {
        let s = &pool[rng.gen_range(0..pool.len())];
        if s.has_labels() {
            return s;
        }
    }
}

struct Run<'a> {
    config: &'a TrainConfig,
    train_pools: Vec<&'a [TrainingSample]>,
    val_pools: Vec<&'a [TrainingSample]>,
}

/// Train from `params` on one or two sources, alternating sources every
/// iteration.
pub fn train(params: ModelParams, sources: &[DataSource], config: &TrainConfig) -> Result<TrainOutcome> {
    let run = Run {
        config,
        train_pools: sources.iter().map(|s| s.training.as_slice()).collect(),
        val_pools: sources.iter().map(|s| s.validation.as_slice()).collect(),
    };
    let state = TrainState::new(params, config.seed);
    run.execute(state)
}

impl Run<'_> {
    fn validate_inputs(&self) -> Result<()> {
        let c = self.config;
        if c.epochs == 0 || c.train_epoch_size == 0 {
            return Err(Error::Config("epochs and train_epoch_size must be positive".into()));
        }
        if c.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        if self.train_pools.is_empty() || self.train_pools.iter().any(|p| !p.iter().any(|s| s.has_labels())) {
            return Err(Error::InvalidInput("every training split needs at least one annotated field of view".into()));
        }
        Ok(())
    }

    fn execute(&self, mut state: TrainState) -> Result<TrainOutcome> {
        self.validate_inputs()?;
        let c = self.config;
        state.params.validate()?;
        let mut log = match &c.log_path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(File::create(p)?))
            }
            None => None,
        };
        let mut history = Vec::new();
        let mut seen = BTreeSet::new();
        let mut max_gradient: f64 = 0.0;
        let mut iterations = 0;
        let mut stopped_early = false;
        let has_validation = self.val_pools.iter().any(|p| p.iter().any(|s| s.has_labels())) && c.val_epoch_size > 0;

        for _ in 0..c.epochs {
            state.epoch += 1;
            let epoch = state.epoch;
            let (lr, mu) = c.schedule.lookup(epoch)?;
            let mut train_sum = 0.0;
            for _ in 0..c.train_epoch_size {
                let pool = self.train_pools[state.toggle % self.train_pools.len()];
                state.toggle = (state.toggle + 1) % self.train_pools.len();
                let sample = pick(pool, &mut state.rng);
                seen.insert(sample.fov_id.clone());
                let patch = sample_patch(&sample.image, &sample.labels, &sample.weights, c.patch_size, &mut state.rng)?;
                let input = image_tensor(&patch.image);
                let (loss, grads) = loss_and_gradients(
                    &state.params,
                    &input,
                    &patch.labels,
                    &patch.weights,
                    Mode::Train,
                    &mut state.rng,
                    c.weight_decay,
                )?;
                if !loss.data.is_finite() {
                    return Err(Error::InvalidInput(format!("training loss diverged at epoch {epoch}")));
                }
                max_gradient = max_gradient.max(grads.max_abs());
                sgd_step(&mut state.params, &mut state.velocity, &grads, lr, mu);
                train_sum += loss.data;
                iterations += 1;
            }
            let train_loss = train_sum / c.train_epoch_size as f64;
            let val_loss = if has_validation {
                validation_loss(&state.params, &self.val_pools, c.val_epoch_size, c.patch_size, c.seed)?
            } else {
                None
            };
            let record = EpochRecord { epoch, train_loss, val_loss, learning_rate: lr, momentum: mu };
            info!("epoch {epoch}: train {train_loss:.5} val {val_loss:?} lr {lr:e} momentum {mu}");
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            history.push(record);
            state.params.meta.epoch = epoch;

            let improved = match (val_loss, state.best_val) {
                (None, _) => true,
                (Some(v), None) => v.is_finite(),
                (Some(v), Some(best)) => v < best - c.min_delta,
            };
            if improved {
                state.best_val = val_loss;
                state.best_params = state.params.clone();
                state.best_epoch = epoch;
                state.epochs_since_improvement = 0;
                if let Some(dir) = &c.checkpoint_dir {
                    checkpoint::save(&state.best_params, dir.join("best"))?;
                }
            } else {
                state.epochs_since_improvement += 1;
            }
            if let Some(dir) = &c.checkpoint_dir {
                if c.checkpoint_every > 0 && epoch % c.checkpoint_every == 0 {
                    checkpoint::save(&state.params, dir.join(format!("epoch-{epoch:04}")))?;
                }
            }
            if has_validation && state.epochs_since_improvement > c.patience {
                stopped_early = true;
                info!("early stop at epoch {epoch}; best epoch {}", state.best_epoch);
                break;
            }
        }

        Ok(TrainOutcome {
            best: state.best_params,
            last: state.params,
            best_epoch: state.best_epoch,
            history,
            stopped_early,
            seen_fovs: seen,
            max_gradient,
            iterations,
        })
    }
}

/// Fields of view for one fine-tuning round: `F` carries new corrections,
/// `A` and `B` are disjoint random draws from the prior training data used
/// for training and validation respectively.
#[derive(Clone, Debug)]
pub struct FineTuneJob {
    pub corrections: Vec<TrainingSample>,
    pub replay: Vec<TrainingSample>,
    pub validation: Vec<TrainingSample>,
}

impl FineTuneJob {
    /// Draw `A` and `B` with `|A| = |B| = |F|`. When the prior data holds
    /// fewer than `2|F|` fields of view, both are shrunk to half of it.
    pub fn assemble<R: Rng + ?Sized>(corrections: Vec<TrainingSample>, prior: &[TrainingSample], rng: &mut R) -> Result<Self> {
        if corrections.is_empty() {
            return Err(Error::InvalidInput("fine-tuning needs at least one corrected field of view".into()));
        }
        let mut n = corrections.len();
        if prior.len() < 2 * n {
            let shrunk = prior.len() / 2;
            warn!("prior data has {} fields of view; using {shrunk} for each of A and B instead of {n}", prior.len());
            n = shrunk;
        }
        let mut order: Vec<usize> = (0..prior.len()).collect();
        order.shuffle(rng);
        let replay = order[..n].iter().map(|&i| prior[i].clone()).collect();
        let validation = order[n..2 * n].iter().map(|&i| prior[i].clone()).collect();
        Ok(Self { corrections, replay, validation })
    }

    pub fn n(&self) -> usize {
        self.corrections.len()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Epochs run when there is no validation set.
    pub epochs_without_validation: usize,
    pub train_epoch_size: usize,
    pub val_epoch_size: usize,
    pub patch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            momentum: 0.999,
            max_epochs: 20,
            patience: 3,
            min_delta: 0.0,
            epochs_without_validation: 5,
            train_epoch_size: 175,
            val_epoch_size: 25,
            patch_size: DEFAULT_PATCH_SIZE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
        }
    }
}

/// Continue training `parent` on `F ∪ A`, validating on `B`. The parent's
/// own `B` loss is the initial best, so a round that never improves returns
/// the parent's weights. The child records the parent's id.
pub fn finetune(parent: &ModelParams, job: &FineTuneJob, config: &FineTuneConfig) -> Result<TrainOutcome> {
    let pool: Vec<TrainingSample> = job.corrections.iter().chain(&job.replay).cloned().collect();
    let has_validation = !job.validation.is_empty();
    let train_config = TrainConfig {
        epochs: if has_validation { config.max_epochs } else { config.epochs_without_validation },
        train_epoch_size: config.train_epoch_size,
        val_epoch_size: config.val_epoch_size,
        patch_size: config.patch_size,
        patience: config.patience,
        min_delta: config.min_delta,
        schedule: Schedule::constant(config.learning_rate, config.momentum)?,
        weight_decay: config.weight_decay,
        seed: config.seed,
        checkpoint_dir: None,
        checkpoint_every: 0,
        log_path: None,
    };
    let run = Run {
        config: &train_config,
        train_pools: vec![pool.as_slice()],
        val_pools: vec![job.validation.as_slice()],
    };
    let mut start = parent.clone();
    start.meta.parent_id = parent.meta.model_id.clone();
    start.meta.model_id = None;
    start.meta.epoch = 0;
    let mut state = TrainState::new(start, config.seed);
    if has_validation {
        state.best_val =
            validation_loss(&state.params, &[job.validation.as_slice()], config.val_epoch_size, config.patch_size, config.seed)?;
    }
    run.execute(state)
}
