//! `lymphdet` command-line interface.
//!
//! Settings resolve as flag, then environment variable, then the TOML file
//! given by `--config` / `LYMPHDET_CONFIG`, then built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use lymphdet::config::AppConfig;
use lymphdet::dataset;
use lymphdet::service::Service;
use lymphdet_core::annotation::{compile_maps, read_records, split_dataset, AnnotationSet};
use lymphdet_core::checkpoint;
use lymphdet_core::model::{init_params, predict};
use lymphdet_core::postprocess::{
    calibrate_threshold, detect, render_overlay, threshold_grid, DetectionRecord, PostprocessConfig,
};
use lymphdet_core::raster::RgbImage;
use lymphdet_core::stain::{fit_reference, normalize};
use lymphdet_core::synth::{generate_scene, SceneConfig};
use lymphdet_core::trainer::{train, DataSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "lymphdet", version, about = "Lymphocyte detection from sparse annotations")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "LYMPHDET_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on one or two annotated datasets.
    Train(TrainArgs),
    /// Detect lymphocytes in images with a checkpoint.
    Detect(DetectArgs),
    /// Compile an annotation file into label and weight images.
    CompileAnnotations(CompileArgs),
    /// Run one fine-tuning round on the service's unconsumed corrections.
    Finetune(DataDirArgs),
    /// Pick the threshold that makes a new model's masks match an old one's.
    CalibrateThreshold(CalibrateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write synthetic scenes with ground-truth annotations.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directories (`<stem>.png` + `<stem>.jsonl`); sources alternate
    /// every iteration.
    #[arg(long = "data", required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Output directory: `model/`, `checkpoints/` and `loss.jsonl`.
    #[arg(long, env = "LYMPHDET_OUT")]
    out: PathBuf,
    #[arg(long, env = "LYMPHDET_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "LYMPHDET_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "LYMPHDET_PATCH_SIZE")]
    patch_size: Option<usize>,
    /// Image whose colour statistics become the stain reference.
    #[arg(long)]
    stain_reference: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long, env = "LYMPHDET_MODEL")]
    model: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    #[arg(long, env = "LYMPHDET_OUT")]
    out: PathBuf,
    /// Overrides the threshold stored with the model.
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    /// Only compile records of this field of view (default: all records).
    #[arg(long)]
    fov_id: Option<String>,
    #[arg(long, env = "LYMPHDET_R1")]
    r1: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataDirArgs {
    #[arg(long, env = "LYMPHDET_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, env = "LYMPHDET_PRIOR_DIR")]
    prior_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    old: PathBuf,
    #[arg(long)]
    new: PathBuf,
    /// Reference images (old training images).
    #[arg(long, required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Store the result in the new checkpoint's metadata.
    #[arg(long)]
    write: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    dirs: DataDirArgs,
    #[arg(long, env = "LYMPHDET_BIND")]
    bind: Option<String>,
    /// Checkpoint registered when the registry is empty.
    #[arg(long, env = "LYMPHDET_MODEL")]
    model: Option<PathBuf>,
    /// Unconsumed corrections that trigger fine-tuning.
    #[arg(long, env = "LYMPHDET_TRIGGER")]
    trigger: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 6)]
    lymphocytes: usize,
    #[arg(long, default_value_t = 3)]
    distractors: usize,
    #[arg(long, default_value_t = 0.0)]
    clustering: f64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = AppConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Train(a) => cmd_train(config, a),
        Command::Detect(a) => cmd_detect(a),
        Command::CompileAnnotations(a) => cmd_compile(config, a),
        Command::Finetune(a) => cmd_finetune(config, a),
        Command::CalibrateThreshold(a) => cmd_calibrate(a),
        Command::Serve(a) => cmd_serve(config, a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn cmd_train(mut config: AppConfig, a: TrainArgs) -> anyhow::Result<()> {
    if a.data.len() > 2 {
        bail!("at most two dataset directories are supported");
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    if let Some(k) = a.patch_size {
        config.train.patch_size = k;
    }
    let stain = a.stain_reference.as_deref().map(RgbImage::load_png).transpose()?.map(|img| fit_reference(&img));
    let mut sources = Vec::new();
    for (i, dir) in a.data.iter().enumerate() {
        let items = dataset::load_dir(dir)?;
        if items.is_empty() {
            bail!("{} holds no annotated images", dir.display());
        }
        let samples = dataset::to_samples(&items, config.r1, stain.as_ref())?;
        let split = if samples.len() < 2 {
            lymphdet_core::annotation::DatasetSplit { training: samples, validation: Vec::new() }
        } else {
            split_dataset(samples, 1.0 - config.validation_ratio, config.train.seed.wrapping_add(i as u64))?
        };
        info!("{}: {} training, {} validation", dir.display(), split.training.len(), split.validation.len());
        sources.push(DataSource {
            name: dir.display().to_string(),
            training: split.training,
            validation: split.validation,
        });
    }
    let mut params = match &a.init {
        Some(p) => checkpoint::load(p)?,
        None => init_params::<f32>(&config.network, config.train.seed)?,
    };
    params.meta.stain = stain.or(params.meta.stain);
    fs::create_dir_all(&a.out)?;
    config.train.checkpoint_dir = Some(a.out.join("checkpoints"));
    config.train.log_path = Some(a.out.join("loss.jsonl"));
    let outcome = train(params, &sources, &config.train)?;
    checkpoint::save(&outcome.best, a.out.join("model"))?;
    info!(
        "best epoch {} of {} ({} iterations); model written to {}",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.iterations,
        a.out.join("model").display()
    );
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn cmd_detect(a: DetectArgs) -> anyhow::Result<()> {
    let params = checkpoint::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let config = PostprocessConfig::with_threshold(a.threshold.unwrap_or(params.meta.threshold));
    fs::create_dir_all(&a.out)?;
    for path in &a.images {
        let name = stem(path);
        let raw = RgbImage::load_png(path).with_context(|| format!("loading {}", path.display()))?;
        let image = match &params.meta.stain {
            Some(reference) => normalize(&raw, reference)?,
            None => raw.clone(),
        };
        let probs = predict(&params, &image)?;
        let detections = detect(&probs, &config)?;
        let mut text = String::new();
        for d in &detections {
            text.push_str(&serde_json::to_string(&DetectionRecord::new(&name, d))?);
            text.push('\n');
        }
        fs::write(a.out.join(format!("{name}.detections.jsonl")), text)?;
        probs.save_png(a.out.join(format!("{name}.prob.png")))?;
        render_overlay(&raw, &detections).save_png(a.out.join(format!("{name}.overlay.png")))?;
        println!("{name}: {} detections", detections.len());
    }
    Ok(())
}

fn cmd_compile(config: AppConfig, a: CompileArgs) -> anyhow::Result<()> {
    let records = read_records(&a.annotations)?;
    let fov = a.fov_id.clone().unwrap_or_else(|| stem(&a.annotations));
    let mut set = AnnotationSet::new(fov.clone());
    for r in records.iter().filter(|r| a.fov_id.as_ref().map_or(true, |f| &r.fov_id == f)) {
        set.push(r)?;
    }
    set.check_bounds(a.height, a.width)?;
    let (labels, weights) = compile_maps(&set, a.height, a.width, a.r1.unwrap_or(config.r1))?;
    fs::create_dir_all(&a.out)?;
    labels.save_png(a.out.join(format!("{fov}.labels.png")))?;
    weights.save_png(a.out.join(format!("{fov}.weights.png")))?;
    println!("{fov}: {} labelled pixels", labels.labeled_pixels().len());
    Ok(())
}

fn apply_dirs(config: &mut AppConfig, dirs: DataDirArgs) {
    if let Some(d) = dirs.data_dir {
        config.service.data_dir = d;
    }
    if let Some(p) = dirs.prior_dir {
        config.service.prior_dir = Some(p);
    }
}

fn cmd_finetune(mut config: AppConfig, a: DataDirArgs) -> anyhow::Result<()> {
    apply_dirs(&mut config, a);
    let service = Service::open(config)?;
    let entry = service.run_finetune()?;
    println!(
        "{} (parent {}) threshold {} at {}",
        entry.model_id,
        entry.parent_id.as_deref().unwrap_or("-"),
        entry.threshold,
        entry.checkpoint.display()
    );
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> anyhow::Result<()> {
    let old = checkpoint::load(&a.old)?;
    let mut new = checkpoint::load(&a.new)?;
    let mut old_maps = Vec::new();
    let mut new_maps = Vec::new();
    for path in &a.images {
        let raw = RgbImage::load_png(path)?;
        let norm = |p: &lymphdet_core::model::ModelParams| -> anyhow::Result<RgbImage> {
            Ok(match &p.meta.stain {
                Some(r) => normalize(&raw, r)?,
                None => raw.clone(),
            })
        };
        old_maps.push(predict(&old, &norm(&old)?)?);
        new_maps.push(predict(&new, &norm(&new)?)?);
    }
    let t = calibrate_threshold(&old_maps, &new_maps, old.meta.threshold, &threshold_grid())?;
    println!("{t}");
    if a.write {
        new.meta.threshold = t;
        checkpoint::save(&new, &a.new)?;
    }
    Ok(())
}

fn cmd_serve(mut config: AppConfig, a: ServeArgs) -> anyhow::Result<()> {
    apply_dirs(&mut config, a.dirs);
    if let Some(b) = a.bind {
        config.service.bind = b;
    }
    if let Some(m) = a.model {
        config.service.model = Some(m);
    }
    if let Some(t) = a.trigger {
        config.service.finetune_trigger = t;
    }
    let bind = config.service.bind.clone();
    let service = Service::open(config)?;
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(lymphdet::http::serve(service, &bind))
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SceneConfig {
        height: a.height,
        width: a.width,
        lymphocytes: a.lymphocytes,
        distractors: a.distractors,
        clustering: a.clustering,
        ..SceneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for i in 0..a.count {
        let name = format!("scene-{i:04}");
        let mut scene = generate_scene(&cfg, &mut rng)?;
        scene.annotations.fov_id = name.clone();
        scene.save(&a.out, &name)?;
    }
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}
