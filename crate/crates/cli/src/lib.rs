//! Command runners behind the `pinadapt` binary. Each runner resolves its
//! configuration, echoes it into the output directory before doing work,
//! and writes machine-readable results as files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use pinadapt::adapt::{
    finetune_classifier, load_checkpoint, save_checkpoint, source_only_g_train, train_source,
    write_feature_cache, augment_features, AugmentOptions, Segmenter,
};
use pinadapt::backend::{EncoderBackend, Prompt, TemplateSet, ToyBackend};
use pinadapt::concept::{build_concept_prompt_embedding, load_concept, optimize_concept, save_concept};
use pinadapt::data::{decode_image, load_all, DatasetSpec, RunConfig, SegSample};
use pinadapt::e2e::{run_toy_e2e, ToyE2eParams};
use pinadapt::error::Error;
use pinadapt::eval::{aggregate_reports, evaluate_model};
use pinadapt::mining::{mine_bank, save_bank, load_bank, TargetDescriptor};
use pinadapt::rng::{rng_for, Stream};
use pinadapt::stats::SnrDb;
use pinadapt::types::{EmbeddingVector, FeatureMap, Image};

/// Process exit codes: 0 ok, 1 experiment gate failed, 2 usage/validation,
/// 3 runtime failure.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: if e.is_validation() { 2 } else { 3 },
            message: e.to_string(),
        }
    }
}

pub type CliResult = Result<(), CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

/// Configure the rayon pool size; silently keeps the default pool if one was
/// already installed.
pub fn configure_workers(workers: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    if workers.is_some() {
        log::warn!("built without the parallel feature; --workers has no effect");
    }
}

/// Load the run configuration, apply the seed override, validate.
pub fn resolve_config(
    config_path: Option<&Path>,
    backend_default: &str,
    seed_override: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => match backend_default {
            "toy" => RunConfig::toy_default(0),
            other => RunConfig::reference_default(0).with_backend(other)?,
        },
    };
    if let Some(seed) = seed_override {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

trait RunConfigExt: Sized {
    fn with_backend(self, backend: &str) -> Result<Self, CliError>;
}

impl RunConfigExt for RunConfig {
    fn with_backend(mut self, backend: &str) -> Result<Self, CliError> {
        self.backend = backend.to_string();
        Ok(self)
    }
}

/// Build the encoder named by the config.
pub fn build_backend(cfg: &RunConfig) -> Result<Arc<dyn EncoderBackend>, CliError> {
    match cfg.backend.as_str() {
        "toy" => Ok(Arc::new(ToyBackend::new())),
        "clip-rn50" | "clip-rn101" => {
            let dir = cfg
                .model_dir
                .clone()
                .or_else(|| std::env::var_os(pinadapt::MODEL_DIR_ENV).map(PathBuf::from))
                .ok_or_else(|| {
                    usage(format!(
                        "backend '{}' needs pretrained weights: set model_dir in the config \
                         or the {} environment variable",
                        cfg.backend,
                        pinadapt::MODEL_DIR_ENV
                    ))
                })?;
            let backend = pinadapt::backend::clip::ClipBackend::load(&dir, &cfg.backend)?;
            Ok(Arc::new(backend))
        }
        other => Err(usage(format!("unknown backend '{other}'"))),
    }
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.echo_into(out)?;
    log::info!("resolved config echoed to {}", out.join("resolved_config.toml").display());
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::from(Error::io(path.display().to_string(), e)))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Center-crop to a square and nearest-resize to the backend resolution.
fn fit_to_backend(image: &Image, size: (usize, usize)) -> Image {
    let (h, w) = (image.height(), image.width());
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let v = image.values();
    let (th, tw) = size;
    let mut out = ndarray::Array3::<f64>::zeros((3, th, tw));
    for y in 0..th {
        for x in 0..tw {
            let sy = y0 + y * side / th;
            let sx = x0 + x * side / tw;
            for c in 0..3 {
                out[[c, y, x]] = v[[c, sy, sx]];
            }
        }
    }
    Image::new(out).expect("resample of valid image")
}

const CROP_POLICY: &str = "center-crop+nearest-resize";

fn mining_features(
    cfg: &RunConfig,
    backend: &dyn EncoderBackend,
) -> Result<Vec<FeatureMap>, CliError> {
    let spec = cfg
        .datasets
        .source_train
        .as_ref()
        .ok_or_else(|| usage("config has no datasets.source_train for mining"))?;
    let samples = load_all(spec)?;
    let native = backend.native_image_size();
    let features = samples
        .iter()
        .map(|s| {
            let img = if (s.image.height(), s.image.width()) == native {
                s.image.clone()
            } else {
                fit_to_backend(&s.image, native)
            };
            backend.extract_low_features(&img)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(features)
}

/// Guidance source for `mine`.
pub enum MineTarget {
    Prompt(String),
    ImagePath(PathBuf),
    Concept { dir: PathBuf, suffix: String },
}

pub fn run_mine(
    config: Option<&Path>,
    seed: Option<u64>,
    target: MineTarget,
    out: &Path,
) -> CliResult {
    let cfg = resolve_config(config, "toy", seed)?;
    echo_config(&cfg, out)?;
    let backend = build_backend(&cfg)?;

    let (embedding, descriptor): (EmbeddingVector, TargetDescriptor) = match &target {
        MineTarget::Prompt(text) => {
            let templates = if cfg.backend == "toy" {
                TemplateSet::single()
            } else {
                TemplateSet::imagenet()
            };
            let prompt = Prompt::new(text.clone(), templates)?;
            (
                backend.embed_text(&prompt)?,
                TargetDescriptor::Prompt { value: text.clone() },
            )
        }
        MineTarget::ImagePath(path) => {
            let img = decode_image(path)?;
            let fitted = fit_to_backend(&img, backend.native_image_size());
            (
                backend.embed_image(&fitted)?,
                TargetDescriptor::Image {
                    content_hash: file_sha256(path)?,
                },
            )
        }
        MineTarget::Concept { dir, suffix } => {
            let (concept, meta) = load_concept(dir)?;
            if meta.backend_id != backend.id() {
                return Err(Error::EncoderMismatch {
                    artifact: meta.backend_id,
                    backend: backend.id().to_string(),
                }
                .into());
            }
            (
                build_concept_prompt_embedding(&concept, suffix, backend.as_ref())?,
                TargetDescriptor::Concept {
                    suffix: suffix.clone(),
                    concept_hash: pinadapt::concept::concept_fingerprint(&concept),
                },
            )
        }
    };

    let features = mining_features(&cfg, backend.as_ref())?;
    log::info!("mining {} styles", features.len());
    let bank = mine_bank(
        &features,
        &embedding,
        &cfg.mining,
        backend.as_ref(),
        descriptor,
        CROP_POLICY,
    )
    .map_err(|e| CliError {
        code: 3,
        message: format!("mining failed: {e}"),
    })?;
    save_bank(&bank, &out.join("bank"))?;
    println!(
        "bank written: {} styles, {} non-positive sigma channels",
        bank.len(),
        bank.manifest.sigma_nonpositive_total
    );
    if bank.manifest.sigma_nonpositive_total > 0 {
        log::warn!(
            "{} mined sigma channels are non-positive (unconstrained optimization)",
            bank.manifest.sigma_nonpositive_total
        );
    }
    Ok(())
}

pub fn run_concept(
    config: Option<&Path>,
    seed: Option<u64>,
    suffix: &str,
    out: &Path,
) -> CliResult {
    let cfg = resolve_config(config, "toy", seed)?;
    echo_config(&cfg, out)?;
    let backend = build_backend(&cfg)?;
    let spec = cfg
        .datasets
        .source_train
        .as_ref()
        .ok_or_else(|| usage("config has no datasets.source_train for concept optimization"))?;
    let samples = load_all(spec)?;
    let native = backend.native_image_size();
    let images: Vec<Image> = samples
        .iter()
        .map(|s| {
            if (s.image.height(), s.image.width()) == native {
                s.image.clone()
            } else {
                fit_to_backend(&s.image, native)
            }
        })
        .collect();
    let (concept, trajectory) = optimize_concept(&images, suffix, &cfg.concept, backend.as_ref())?;
    save_concept(&concept, &out.join("concept"), cfg.concept.seed, backend.id())?;
    let traj_path = out.join("concept/loss_trajectory.json");
    fs::write(&traj_path, serde_json::to_string_pretty(&trajectory).unwrap())
        .map_err(|e| CliError::from(Error::io(traj_path.display().to_string(), e)))?;
    println!(
        "concept written: {} tokens, epoch loss {:.6} -> {:.6}",
        concept.n_tokens(),
        trajectory.first().unwrap_or(&f64::NAN),
        trajectory.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, which: &str) -> Result<Vec<SegSample>, CliError> {
    let spec: &DatasetSpec = match which {
        "source-train" => cfg.datasets.source_train.as_ref(),
        "source-val" => cfg.datasets.source_val.as_ref(),
        "target-val" => cfg.datasets.target_val.as_ref(),
        other => return Err(usage(format!("unknown split '{other}'"))),
    }
    .ok_or_else(|| usage(format!("config has no datasets.{}", which.replace('-', "_"))))?;
    Ok(load_all(spec)?)
}

pub fn run_train_source(config: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult {
    let cfg = resolve_config(config, "toy", seed)?;
    echo_config(&cfg, out)?;
    let backend = build_backend(&cfg)?;
    let dataset = load_split(&cfg, "source-train")?;
    let mut model = Segmenter::new(
        backend,
        dataset[0].num_classes,
        cfg.head_hidden,
        cfg.source_train.seed,
    )?;
    let stats = train_source(&mut model, &dataset, &cfg.source_train)?;
    save_checkpoint(&model, &out.join("checkpoint"), serde_json::to_value(&cfg).unwrap())?;
    let stats_path = out.join("train_stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&stats).unwrap())
        .map_err(|e| CliError::from(Error::io(stats_path.display().to_string(), e)))?;
    println!(
        "source training done: loss {:.4} -> {:.4}; checkpoint at {}",
        stats.initial_loss,
        stats.final_loss,
        out.join("checkpoint").display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn run_adapt(
    config: Option<&Path>,
    seed: Option<u64>,
    checkpoint: &Path,
    bank_dir: Option<&Path>,
    self_perturb_snr: Option<f64>,
    feature_cache: Option<&Path>,
    out: &Path,
) -> CliResult {
    let cfg = resolve_config(config, "toy", seed)?;
    echo_config(&cfg, out)?;
    let backend = build_backend(&cfg)?;
    let dataset = load_split(&cfg, "source-train")?;
    let mut model = load_checkpoint(checkpoint, backend)?;
    if !model.provenance.source_trained {
        log::warn!(
            "checkpoint {} lacks a source-training record; adaptation from scratch degrades results",
            checkpoint.display()
        );
    }
    let stats = match (bank_dir, self_perturb_snr) {
        (Some(dir), None) => {
            let bank = load_bank(dir)?;
            finetune_classifier(&mut model, &dataset, &bank, &cfg.adapt, feature_cache)?
        }
        (None, Some(snr)) => source_only_g_train(
            &mut model,
            &dataset,
            SnrDb::Db(snr),
            &cfg.adapt,
            feature_cache,
        )?,
        _ => {
            return Err(usage(
                "adapt needs exactly one of --bank or --self-perturb-snr",
            ))
        }
    };
    save_checkpoint(&model, &out.join("checkpoint"), serde_json::to_value(&cfg).unwrap())?;
    let stats_path = out.join("train_stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&stats).unwrap())
        .map_err(|e| CliError::from(Error::io(stats_path.display().to_string(), e)))?;
    println!(
        "adaptation done: loss {:.4} -> {:.4}; checkpoint at {}",
        stats.initial_loss,
        stats.final_loss,
        out.join("checkpoint").display()
    );
    Ok(())
}

pub fn run_eval(
    config: Option<&Path>,
    seed: Option<u64>,
    checkpoints: &[PathBuf],
    split: &str,
    out: &Path,
) -> CliResult {
    if checkpoints.is_empty() {
        return Err(usage("eval needs at least one --checkpoint"));
    }
    let cfg = resolve_config(config, "toy", seed)?;
    echo_config(&cfg, out)?;
    let backend = build_backend(&cfg)?;
    let samples = load_split(&cfg, split)?;
    let mut reports = Vec::new();
    for (i, ckpt) in checkpoints.iter().enumerate() {
        let model = load_checkpoint(ckpt, backend.clone())?;
        let report = evaluate_model(&model, &samples, cfg.seed, serde_json::to_value(&cfg).unwrap())?;
        let path = out.join(format!("eval-{i}.json"));
        fs::write(&path, serde_json::to_string_pretty(&report).unwrap())
            .map_err(|e| CliError::from(Error::io(path.display().to_string(), e)))?;
        println!("{}: mIoU {:.4} ({} images)", ckpt.display(), report.miou, report.num_images);
        reports.push(report);
    }
    if reports.len() > 1 {
        let agg = aggregate_reports(&reports)?;
        let path = out.join("eval-aggregate.json");
        fs::write(&path, serde_json::to_string_pretty(&agg).unwrap())
            .map_err(|e| CliError::from(Error::io(path.display().to_string(), e)))?;
        println!(
            "aggregate over {} runs: mIoU {:.4} +/- {:.4}",
            agg.runs, agg.mean_miou, agg.std_miou
        );
    }
    Ok(())
}

pub fn run_augment(
    config: Option<&Path>,
    seed: Option<u64>,
    bank_dir: &Path,
    style_mix: bool,
    gauss_snr: Option<f64>,
    out: &Path,
) -> CliResult {
    let cfg = resolve_config(config, "toy", seed)?;
    echo_config(&cfg, out)?;
    let backend = build_backend(&cfg)?;
    let bank = load_bank(bank_dir)?;
    if bank.manifest.encoder_id != backend.id() {
        return Err(Error::EncoderMismatch {
            artifact: bank.manifest.encoder_id.clone(),
            backend: backend.id().to_string(),
        }
        .into());
    }
    let features = mining_features(&cfg, backend.as_ref())?;
    let opts = AugmentOptions {
        style_mix,
        gauss_snr_db: gauss_snr.map(SnrDb::Db),
    };
    let augmented = features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = rng_for(cfg.seed, Stream::Augment, i as u64);
            augment_features(f, &bank, &opts, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_feature_cache(&augmented, &out.join("augmented"), backend.id())?;
    println!(
        "augmented {} feature maps into {}",
        augmented.len(),
        out.join("augmented").display()
    );
    Ok(())
}

pub fn run_toy_e2e_cmd(
    out: &Path,
    seed: u64,
    n_train: Option<usize>,
    n_val: Option<usize>,
) -> CliResult {
    let mut params = ToyE2eParams::default_for_seed(seed);
    if let Some(n) = n_train {
        params.n_train = n;
    }
    if let Some(n) = n_val {
        params.n_val = n;
    }
    // config echo: the params double as the resolved configuration
    fs::create_dir_all(out).map_err(|e| CliError::from(Error::io(out.display().to_string(), e)))?;
    let echo_path = out.join("resolved_config.toml");
    let echo = toml::to_string_pretty(&params)
        .map_err(|e| CliError::from(Error::Config(format!("toml encode: {e}"))))?;
    fs::write(&echo_path, echo)
        .map_err(|e| CliError::from(Error::io(echo_path.display().to_string(), e)))?;

    let report = run_toy_e2e(out, &params).map_err(|e| CliError {
        code: 3,
        message: e.to_string(),
    })?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    println!(
        "source mIoU {:.4} -> adapted mIoU {:.4} on shifted val (delta {:+.4})",
        report.source_shifted_miou, report.adapted_shifted_miou, report.delta
    );
    if report.delta <= 0.0 {
        return Err(CliError {
            code: 1,
            message: format!(
                "adapted model did not beat source-only: delta {:+.4}",
                report.delta
            ),
        });
    }
    Ok(())
}

pub fn run_show_config(backend: &str, config: Option<&Path>) -> CliResult {
    let cfg = match config {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => match backend {
            "toy" => RunConfig::toy_default(0),
            "clip-rn50" => RunConfig::reference_default(0),
            "clip-rn101" => {
                let mut c = RunConfig::reference_default(0);
                c.backend = "clip-rn101".into();
                c
            }
            other => return Err(usage(format!("unknown backend '{other}'"))),
        },
    };
    println!("{}", cfg.to_toml_string()?);
    Ok(())
}

