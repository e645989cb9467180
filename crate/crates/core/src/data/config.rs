//! Run configuration: one structured file resolving every stage of the
//! pipeline. Written as TOML; every command echoes its resolved copy into
//! the output directory before doing work.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, SourceTrainConfig};
use crate::concept::ConceptConfig;
use crate::error::{Error, Result};
use crate::mining::MiningConfig;

use super::DatasetSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetsSection {
    pub source_train: Option<DatasetSpec>,
    pub source_val: Option<DatasetSpec>,
    pub target_val: Option<DatasetSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Backend identifier: "toy", "clip-rn50" or "clip-rn101".
    pub backend: String,
    pub seed: u64,
    /// Classifier hidden width.
    pub head_hidden: usize,
    /// Overrides the `PINADAPT_MODEL_DIR` environment variable.
    #[serde(default)]
    pub model_dir: Option<PathBuf>,
    #[serde(default)]
    pub datasets: DatasetsSection,
    pub mining: MiningConfig,
    pub concept: ConceptConfig,
    pub source_train: SourceTrainConfig,
    pub adapt: AdaptConfig,
}

impl RunConfig {
    /// Reference-scale defaults mirroring the published training recipe.
    pub fn reference_default(seed: u64) -> Self {
        RunConfig {
            backend: "clip-rn50".into(),
            seed,
            head_hidden: 256,
            model_dir: None,
            datasets: DatasetsSection::default(),
            mining: MiningConfig::reference_default(seed),
            concept: ConceptConfig::reference_default(seed),
            source_train: SourceTrainConfig::reference_default(seed),
            adapt: AdaptConfig::reference_default(seed),
        }
    }

    /// Desk-scale defaults for the toy backend.
    pub fn toy_default(seed: u64) -> Self {
        RunConfig {
            backend: "toy".into(),
            seed,
            head_hidden: 16,
            model_dir: None,
            datasets: DatasetsSection::default(),
            mining: MiningConfig::toy_default(seed),
            concept: ConceptConfig::toy_default(seed),
            source_train: SourceTrainConfig::toy_default(seed),
            adapt: AdaptConfig::toy_default(seed),
        }
    }

    /// Propagate one seed into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.mining.seed = seed;
        self.concept.seed = seed;
        self.source_train.seed = seed;
        self.adapt.seed = seed;
        self
    }

    /// Check stage configs and that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        self.mining.validate()?;
        self.concept.validate()?;
        self.source_train.validate()?;
        self.adapt.validate()?;
        if !matches!(self.backend.as_str(), "toy" | "clip-rn50" | "clip-rn101") {
            return Err(Error::Config(format!("unknown backend '{}'", self.backend)));
        }
        for (name, spec) in [
            ("source_train", &self.datasets.source_train),
            ("source_val", &self.datasets.source_val),
            ("target_val", &self.datasets.target_val),
        ] {
            if let Some(spec) = spec {
                if !spec.root.exists() {
                    return Err(Error::Config(format!(
                        "datasets.{name}.root does not exist: {}",
                        spec.root.display()
                    )));
                }
            }
        }
        if let Some(dir) = &self.model_dir {
            if !dir.exists() {
                return Err(Error::Config(format!(
                    "model_dir does not exist: {}",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("toml encode: {e}")))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Echo the fully resolved config into the output directory.
    pub fn echo_into(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        let path = out_dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml_string()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_defaults_match_published_recipe() {
        let cfg = RunConfig::reference_default(0);
        assert_eq!(cfg.source_train.iterations, 200_000);
        assert_eq!(cfg.source_train.crop, 768);
        assert_eq!(cfg.source_train.batch_size, 2);
        assert_eq!(cfg.source_train.lr_classifier, 1e-1);
        assert_eq!(cfg.source_train.lr_trunk, 1e-4);
        assert_eq!(cfg.source_train.momentum, 0.9);
        assert_eq!(cfg.source_train.weight_decay, 1e-4);
        assert!(cfg.source_train.color_jitter && cfg.source_train.hflip);
        assert_eq!(cfg.mining.iterations, 100);
        assert_eq!(cfg.mining.learning_rate, 1.0);
        assert_eq!(cfg.mining.batch_size, 16);
        assert_eq!(cfg.concept.epochs, 10);
        assert_eq!(cfg.concept.batch_size, 16);
        assert_eq!(cfg.concept.learning_rate, 1e-4);
        assert_eq!(cfg.adapt.iterations, 2000);
        assert_eq!(cfg.adapt.batch_size, 8);
        assert_eq!(cfg.adapt.lr_init, 1e-2);
    }

    #[test]
    fn toml_roundtrip_including_remap() {
        let mut cfg = RunConfig::toy_default(3);
        cfg.datasets.source_train = Some(DatasetSpec::cityscapes("/tmp", "train"));
        let text = cfg.to_toml_string().unwrap();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn with_seed_propagates_everywhere() {
        let cfg = RunConfig::toy_default(0).with_seed(99);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.mining.seed, 99);
        assert_eq!(cfg.concept.seed, 99);
        assert_eq!(cfg.source_train.seed, 99);
        assert_eq!(cfg.adapt.seed, 99);
    }

    #[test]
    fn missing_dataset_root_fails_validation() {
        let mut cfg = RunConfig::toy_default(1);
        cfg.datasets.source_train = Some(DatasetSpec::cityscapes("/does/not/exist", "train"));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_backend_rejected() {
        let mut cfg = RunConfig::toy_default(1);
        cfg.backend = "resnet-from-nowhere".into();
        assert!(cfg.validate().is_err());
    }
}
