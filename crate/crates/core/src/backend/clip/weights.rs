//! On-disk weight store for the reference adapter: `model.json` (config +
//! tensor index) plus `model.f32` (concatenated little-endian f32 data).
//! Tensor names follow the public CLIP state_dict naming, so conversion is
//! a direct dump.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub width: usize,
    pub blocks: [usize; 4],
    pub heads: usize,
    pub image_resolution: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
}

impl ClipConfig {
    pub fn rn50() -> Self {
        ClipConfig {
            vision: VisionConfig {
                width: 64,
                blocks: [3, 4, 6, 3],
                heads: 32,
                image_resolution: 768,
                output_dim: 1024,
            },
            text: TextConfig {
                vocab_size: 49408,
                context_length: 77,
                width: 512,
                heads: 8,
                layers: 12,
            },
        }
    }

    pub fn rn101() -> Self {
        ClipConfig {
            vision: VisionConfig {
                width: 64,
                blocks: [3, 4, 23, 3],
                heads: 32,
                image_resolution: 768,
                output_dim: 512,
            },
            ..Self::rn50()
        }
    }

    /// Miniature configuration for gradient and consistency tests.
    pub fn tiny() -> Self {
        ClipConfig {
            vision: VisionConfig {
                width: 8,
                blocks: [1, 1, 1, 1],
                heads: 4,
                image_resolution: 64,
                output_dim: 16,
            },
            text: TextConfig {
                vocab_size: 512,
                context_length: 16,
                width: 16,
                heads: 2,
                layers: 2,
            },
        }
    }

    pub fn for_architecture(name: &str) -> Result<Self> {
        match name {
            "clip-rn50" | "rn50" => Ok(Self::rn50()),
            "clip-rn101" | "rn101" => Ok(Self::rn101()),
            other => Err(Error::Config(format!("unknown reference architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndexEntry {
    shape: Vec<usize>,
    /// Byte offset into model.f32.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelIndex {
    format_version: u32,
    architecture: String,
    config: ClipConfig,
    tensors: HashMap<String, TensorIndexEntry>,
}

/// All tensors of a loaded model, keyed by their state_dict name.
pub struct TensorStore {
    pub architecture: String,
    pub config: ClipConfig,
    tensors: HashMap<String, ArrayD<f64>>,
}

impl TensorStore {
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("model.json");
        let index: ModelIndex = serde_json::from_str(
            &fs::read_to_string(&index_path)
                .map_err(|e| Error::io(index_path.display().to_string(), e))?,
        )
        .map_err(|e| Error::Json {
            path: index_path.display().to_string(),
            source: e,
        })?;
        if index.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(Error::format(
                index_path.display().to_string(),
                format!("format_version {} unsupported", index.format_version),
            ));
        }
        let blob_path = dir.join("model.f32");
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
        let mut tensors = HashMap::with_capacity(index.tensors.len());
        for (name, entry) in index.tensors {
            let len: usize = entry.shape.iter().product();
            let end = entry.offset + len * 4;
            if end > bytes.len() {
                return Err(Error::format(
                    blob_path.display().to_string(),
                    format!("tensor '{name}' runs past the blob ({end} > {})", bytes.len()),
                ));
            }
            let data: Vec<f64> = bytes[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(
                name,
                ArrayD::from_shape_vec(IxDyn(&entry.shape), data).expect("index shape matches len"),
            );
        }
        Ok(TensorStore {
            architecture: index.architecture,
            config: index.config,
            tensors,
        })
    }

    /// Persist in the adapter's format (used to build test fixtures and by
    /// conversion tooling).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let mut blob = Vec::new();
        let mut entries = HashMap::new();
        for name in names {
            let t = &self.tensors[name];
            entries.insert(
                name.clone(),
                TensorIndexEntry {
                    shape: t.shape().to_vec(),
                    offset: blob.len(),
                },
            );
            for v in t.iter() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let index = ModelIndex {
            format_version: WEIGHTS_FORMAT_VERSION,
            architecture: self.architecture.clone(),
            config: self.config.clone(),
            tensors: entries,
        };
        let index_path = dir.join("model.json");
        fs::write(&index_path, serde_json::to_string(&index).unwrap())
            .map_err(|e| Error::io(index_path.display().to_string(), e))?;
        let blob_path = dir.join("model.f32");
        fs::write(&blob_path, blob).map_err(|e| Error::io(blob_path.display().to_string(), e))
    }

    pub fn from_tensors(
        architecture: &str,
        config: ClipConfig,
        tensors: HashMap<String, ArrayD<f64>>,
    ) -> Self {
        TensorStore {
            architecture: architecture.to_string(),
            config,
            tensors,
        }
    }

    fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors.get(name).ok_or_else(|| {
            Error::format("model.json".to_string(), format!("missing tensor '{name}'"))
        })
    }

    pub fn get1(&self, name: &str) -> Result<Array1<f64>> {
        let t = self.get(name)?;
        t.clone()
            .into_dimensionality()
            .map_err(|_| shape_err(name, "1-d", t.shape()))
    }

    pub fn get2(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.get(name)?;
        t.clone()
            .into_dimensionality()
            .map_err(|_| shape_err(name, "2-d", t.shape()))
    }

    pub fn get4(&self, name: &str) -> Result<Array4<f64>> {
        let t = self.get(name)?;
        t.clone()
            .into_dimensionality()
            .map_err(|_| shape_err(name, "4-d", t.shape()))
    }

    /// Fingerprint over every tensor, in name order.
    pub fn fingerprint(&self) -> u64 {
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let parts: Vec<Vec<f64>> = names
            .iter()
            .map(|n| self.tensors[*n].iter().copied().collect())
            .collect();
        crate::backend::fingerprint_params(parts.iter().map(|p| p.as_slice()))
    }
}

fn shape_err(name: &str, want: &str, got: &[usize]) -> Error {
    Error::ShapeMismatch {
        context: "weight tensor",
        expected: format!("{name} as {want}"),
        actual: format!("{got:?}"),
    }
}
