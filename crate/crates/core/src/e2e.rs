//! Desk-scale end-to-end experiment on the toy backend: generate data,
//! train source-only, mine a style bank against a photo-derived target
//! embedding, fine-tune, and compare on the shifted validation set.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapt::{
    finetune_classifier, save_checkpoint, source_only_g_train, train_source, AdaptConfig,
    Segmenter, SourceTrainConfig,
};
use crate::backend::{mean_image_embedding, EncoderBackend, ToyBackend};
use crate::data::{generate_toy_dataset, load_all, SegSample, ShiftSpec, ToyDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, MetricsReport};
use crate::mining::{
    identity_bank, mine_bank, save_bank, MiningConfig, StyleBank, StyleInit, TargetDescriptor,
};
use crate::par;
use crate::stats::SnrDb;
use crate::types::{EmbeddingVector, FeatureMap};

/// Sizes and stage configurations of the toy experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyE2eParams {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// Shifted training images averaged into the target embedding.
    pub target_batch: usize,
    pub head_hidden: usize,
    pub shift: ShiftSpec,
    pub source: SourceTrainConfig,
    pub mining: MiningConfig,
    pub adapt: AdaptConfig,
}

impl ToyE2eParams {
    pub fn default_for_seed(seed: u64) -> Self {
        ToyE2eParams {
            seed,
            n_train: 48,
            n_val: 24,
            target_batch: 16,
            head_hidden: 16,
            shift: ShiftSpec::default(),
            source: SourceTrainConfig::toy_default(seed),
            mining: MiningConfig::toy_default(seed),
            adapt: AdaptConfig::toy_default(seed),
        }
    }
}

/// Materialized toy data plus the shared backend: the fixture every stage
/// of the experiment runs against.
pub struct ToyExperiment {
    pub params: ToyE2eParams,
    pub backend: Arc<ToyBackend>,
    pub dataset: ToyDataset,
    pub clean_train: Vec<SegSample>,
    pub clean_val: Vec<SegSample>,
    pub shifted_train: Vec<SegSample>,
    pub shifted_val: Vec<SegSample>,
}

impl ToyExperiment {
    /// Generate (or regenerate) the toy data under `data_dir` and decode
    /// every split.
    pub fn setup(data_dir: &Path, params: ToyE2eParams) -> Result<Self> {
        let dataset = generate_toy_dataset(
            data_dir,
            params.seed,
            params.n_train,
            params.n_val,
            &params.shift,
        )?;
        Ok(ToyExperiment {
            backend: Arc::new(ToyBackend::new()),
            clean_train: load_all(&dataset.clean_train)?,
            clean_val: load_all(&dataset.clean_val)?,
            shifted_train: load_all(&dataset.shifted_train)?,
            shifted_val: load_all(&dataset.shifted_val)?,
            dataset,
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.clean_train.num_classes
    }

    /// Freshly initialized, source-only trained segmenter.
    pub fn train_source_model(&self) -> Result<Segmenter> {
        let mut model = Segmenter::new(
            self.backend.clone(),
            self.num_classes(),
            self.params.head_hidden,
            self.params.seed,
        )?;
        train_source(&mut model, &self.clean_train, &self.params.source)?;
        Ok(model)
    }

    /// Mean image embedding of a held-out batch of shifted training images:
    /// the photo-driven target for mining.
    pub fn target_embedding(&self) -> Result<EmbeddingVector> {
        let batch = self.params.target_batch.min(self.shifted_train.len());
        let images: Vec<crate::types::Image> = self.shifted_train[..batch]
            .iter()
            .map(|s| s.image.clone())
            .collect();
        mean_image_embedding(self.backend.as_ref(), &images)
    }

    /// Low-level features of every clean training image.
    pub fn train_features(&self) -> Result<Vec<FeatureMap>> {
        par::map_indexed(&self.clean_train, |_, s| {
            self.backend.extract_low_features(&s.image)
        })
        .into_iter()
        .collect()
    }

    /// Mine the style bank against the toy target embedding.
    pub fn mine_target_bank(&self, init: StyleInit) -> Result<StyleBank> {
        let target = self.target_embedding()?;
        let features = self.train_features()?;
        let cfg = MiningConfig {
            init,
            ..self.params.mining.clone()
        };
        mine_bank(
            &features,
            &target,
            &cfg,
            self.backend.as_ref(),
            TargetDescriptor::Image {
                content_hash: format!("toy-shifted-train-mean-{}", self.params.seed),
            },
            "native",
        )
    }

    /// Clone the source model and fine-tune its classifier on the bank.
    pub fn adapt_with(&self, source_model: &Segmenter, bank: &StyleBank) -> Result<Segmenter> {
        let mut adapted = source_model.clone_model();
        finetune_classifier(&mut adapted, &self.clean_train, bank, &self.params.adapt, None)?;
        Ok(adapted)
    }

    /// The bank-free generalization baseline at the given SNR.
    pub fn source_only_g(&self, source_model: &Segmenter, snr: SnrDb) -> Result<Segmenter> {
        let mut model = source_model.clone_model();
        source_only_g_train(&mut model, &self.clean_train, snr, &self.params.adapt, None)?;
        Ok(model)
    }

    pub fn evaluate(&self, model: &Segmenter, samples: &[SegSample]) -> Result<MetricsReport> {
        evaluate_model(
            model,
            samples,
            self.params.seed,
            serde_json::to_value(&self.params).unwrap(),
        )
    }
}

/// Comparison report emitted by the end-to-end run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyE2eReport {
    pub seed: u64,
    pub source_clean_miou: f64,
    pub source_shifted_miou: f64,
    pub adapted_shifted_miou: f64,
    pub adapted_clean_miou: f64,
    /// Adapted minus source-only on the shifted validation set.
    pub delta: f64,
    pub mining_sigma_nonpositive: usize,
    pub bank_size: usize,
}

/// Run the full toy experiment, writing artifacts (data, bank, checkpoints,
/// reports) under `out_dir`.
pub fn run_toy_e2e(out_dir: &Path, params: &ToyE2eParams) -> Result<ToyE2eReport> {
    let stage = |name: &str, e: Error| -> Error {
        Error::Validation(format!("toy-e2e stage '{name}' failed: {e}"))
    };
    let exp = ToyExperiment::setup(&out_dir.join("data"), params.clone())
        .map_err(|e| stage("generate-data", e))?;

    let source_model = exp.train_source_model().map_err(|e| stage("train-source", e))?;
    let source_clean = exp
        .evaluate(&source_model, &exp.clean_val)
        .map_err(|e| stage("eval-source-clean", e))?;
    let source_shifted = exp
        .evaluate(&source_model, &exp.shifted_val)
        .map_err(|e| stage("eval-source-shifted", e))?;

    let bank = exp
        .mine_target_bank(StyleInit::SourceStats)
        .map_err(|e| stage("mine-bank", e))?;
    save_bank(&bank, &out_dir.join("bank")).map_err(|e| stage("save-bank", e))?;

    let adapted = exp.adapt_with(&source_model, &bank).map_err(|e| stage("adapt", e))?;
    let adapted_shifted = exp
        .evaluate(&adapted, &exp.shifted_val)
        .map_err(|e| stage("eval-adapted-shifted", e))?;
    let adapted_clean = exp
        .evaluate(&adapted, &exp.clean_val)
        .map_err(|e| stage("eval-adapted-clean", e))?;

    save_checkpoint(
        &source_model,
        &out_dir.join("checkpoint-source"),
        serde_json::to_value(params).unwrap(),
    )
    .map_err(|e| stage("save-source-checkpoint", e))?;
    save_checkpoint(
        &adapted,
        &out_dir.join("checkpoint-adapted"),
        serde_json::to_value(params).unwrap(),
    )
    .map_err(|e| stage("save-adapted-checkpoint", e))?;

    let report = ToyE2eReport {
        seed: params.seed,
        source_clean_miou: source_clean.miou,
        source_shifted_miou: source_shifted.miou,
        adapted_shifted_miou: adapted_shifted.miou,
        adapted_clean_miou: adapted_clean.miou,
        delta: adapted_shifted.miou - source_shifted.miou,
        mining_sigma_nonpositive: bank.manifest.sigma_nonpositive_total,
        bank_size: bank.len(),
    };
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| Error::io(report_path.display().to_string(), e))?;
    for (name, r) in [
        ("eval-source-clean.json", &source_clean),
        ("eval-source-shifted.json", &source_shifted),
        ("eval-adapted-shifted.json", &adapted_shifted),
        ("eval-adapted-clean.json", &adapted_clean),
    ] {
        let p = out_dir.join(name);
        std::fs::write(&p, serde_json::to_string_pretty(r).unwrap())
            .map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    Ok(report)
}

/// Identity-control run: fine-tune on a bank replaying each instance's own
/// statistics; the source-val score must stay glued to the source model's.
pub fn run_identity_control(exp: &ToyExperiment, source_model: &Segmenter) -> Result<(f64, f64)> {
    let features = exp.train_features()?;
    let bank = identity_bank(&features, exp.backend.as_ref(), exp.params.seed)?;
    let control = exp.adapt_with(source_model, &bank)?;
    let source_clean = exp.evaluate(source_model, &exp.clean_val)?;
    let control_clean = exp.evaluate(&control, &exp.clean_val)?;
    Ok((source_clean.miou, control_clean.miou))
}

/// Output path helper shared by the CLI.
pub fn default_data_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("data")
}
