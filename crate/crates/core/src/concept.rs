//! Source-concept optimization: learn token embeddings whose text encoding
//! aligns with the source image embeddings, then build target prompts by
//! concatenating the learned concept with a textual style suffix.
//!
//! Both encoders stay frozen; only the concept tokens move. On backends
//! without token injection (the toy lookup table), a free-embedding
//! surrogate exercises the same loss and optimizer.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::backend::EncoderBackend;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{rng_for, Stream};
use crate::stats::cosine_distance_with_grad;
use crate::types::{EmbeddingVector, Image};

pub const CONCEPT_FORMAT_VERSION: u32 = 1;

/// Default textual style of the source domain during concept optimization.
pub const DEFAULT_CONCEPT_SUFFIX: &str = "in clear weather";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_tokens: usize,
    pub seed: u64,
}

impl ConceptConfig {
    pub fn reference_default(seed: u64) -> Self {
        ConceptConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-4,
            n_tokens: 1,
            seed,
        }
    }

    /// Larger learning rate matching the toy surrogate's embedding scale.
    pub fn toy_default(seed: u64) -> Self {
        ConceptConfig {
            learning_rate: 5e-2,
            ..Self::reference_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.n_tokens == 0 {
            return Err(Error::validation("concept epochs/batch_size/n_tokens must be positive"));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::validation("concept learning_rate must be >= 0"));
        }
        Ok(())
    }
}

/// Optimized tokens in the text encoder's token-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedding {
    pub tokens: Array2<f64>,
    pub suffix_used_in_training: String,
}

impl ConceptEmbedding {
    pub fn new(tokens: Array2<f64>, suffix: impl Into<String>) -> Result<Self> {
        if tokens.dim().0 == 0 || tokens.dim().1 == 0 {
            return Err(Error::validation("concept needs >= 1 token of width >= 1"));
        }
        if !tokens.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("concept tokens contain non-finite values"));
        }
        Ok(ConceptEmbedding {
            tokens,
            suffix_used_in_training: suffix.into(),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.dim().0
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.dim().1
    }
}

fn gaussian(rng: &mut rand_chacha::ChaCha8Rng, std: f64) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
}

fn init_tokens(
    backend: &dyn EncoderBackend,
    cfg: &ConceptConfig,
) -> Result<Array2<f64>> {
    let ct = backend
        .concept_text()
        .ok_or_else(|| crate::backend::concept_unsupported(backend.id()))?;
    // warm start near the verbalized concept when it tokenizes to the right
    // number of tokens; otherwise a seeded Gaussian at table scale.
    if let Some(tokens) = ct.word_token_embeddings("driving") {
        if tokens.dim().0 == cfg.n_tokens {
            return Ok(tokens);
        }
    }
    let std = ct.token_embedding_std();
    let mut rng = rng_for(cfg.seed, Stream::ConceptInit, 0);
    Ok(Array2::from_shape_fn((cfg.n_tokens, ct.token_dim()), |_| {
        gaussian(&mut rng, std)
    }))
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    let mut rng = rng_for(seed, Stream::ConceptShuffle, epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Optimize the concept tokens against the source image embeddings by SGD on
/// the mean cosine distance between the encoded prompt
/// `<concept> + suffix` and each image embedding. Returns the concept plus
/// the per-epoch mean loss trajectory.
pub fn optimize_concept(
    source_images: &[Image],
    suffix: &str,
    cfg: &ConceptConfig,
    backend: &dyn EncoderBackend,
) -> Result<(ConceptEmbedding, Vec<f64>)> {
    cfg.validate()?;
    if source_images.is_empty() {
        return Err(Error::validation("concept optimization needs source images"));
    }
    let ct = backend
        .concept_text()
        .ok_or_else(|| crate::backend::concept_unsupported(backend.id()))?;
    let mut tokens = init_tokens(backend, cfg)?;

    // image embeddings are reused every epoch; precompute in parallel
    let embeddings: Vec<EmbeddingVector> = par::map_indexed(source_images, |_, img| {
        backend.embed_image(img)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(embeddings.len(), cfg.seed, epoch);
        let mut epoch_loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            // the encoded prompt is shared by the whole batch: one forward,
            // one backward, with the upstream gradient averaged over images
            let batch_embs: Vec<&EmbeddingVector> = batch.iter().map(|i| &embeddings[*i]).collect();
            let batch_loss = std::cell::Cell::new(0.0);
            let (_, grad_tokens) = ct.encode_concept_prompt_vjp(&tokens, suffix, &|text_emb| {
                let mut upstream = Array1::<f64>::zeros(text_emb.len());
                let mut acc = 0.0;
                for e in &batch_embs {
                    let (loss, grad) = cosine_distance_with_grad(text_emb, e)
                        .expect("embedding dims agree");
                    acc += loss;
                    upstream += &grad;
                }
                batch_loss.set(acc);
                upstream / batch_embs.len() as f64
            })?;
            epoch_loss_sum += batch_loss.get();
            tokens -= &(cfg.learning_rate * &grad_tokens);
        }
        trajectory.push(epoch_loss_sum / embeddings.len() as f64);
    }
    Ok((ConceptEmbedding::new(tokens, suffix)?, trajectory))
}

/// Free-embedding surrogate for table-based text encoders: optimize a raw
/// joint-space vector against the image embeddings with the same loss and
/// optimizer. Exercises the optimization loop without token plumbing.
pub fn optimize_free_embedding(
    image_embeddings: &[EmbeddingVector],
    cfg: &ConceptConfig,
) -> Result<(EmbeddingVector, Vec<f64>)> {
    cfg.validate()?;
    if image_embeddings.is_empty() {
        return Err(Error::validation("concept surrogate needs image embeddings"));
    }
    let dim = image_embeddings[0].len();
    let mut rng = rng_for(cfg.seed, Stream::ConceptInit, 1);
    let init_scale = 1.0 / (dim as f64).sqrt();
    let mut v = Array1::from_shape_fn(dim, |_| gaussian(&mut rng, init_scale));

    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(image_embeddings.len(), cfg.seed, epoch);
        let mut epoch_loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let current = EmbeddingVector::new(v.clone())?;
            let mut grad = Array1::<f64>::zeros(dim);
            for i in batch {
                let (loss, g) = cosine_distance_with_grad(&current, &image_embeddings[*i])?;
                epoch_loss_sum += loss;
                grad += &g;
            }
            grad /= batch.len() as f64;
            v -= &(cfg.learning_rate * &grad);
        }
        trajectory.push(epoch_loss_sum / image_embeddings.len() as f64);
    }
    Ok((EmbeddingVector::new(v)?, trajectory))
}

/// Encode `concept ++ tokenize(style_suffix)` through the frozen text
/// encoder; unit-normalized, usable as the mining target.
pub fn build_concept_prompt_embedding(
    concept: &ConceptEmbedding,
    style_suffix: &str,
    backend: &dyn EncoderBackend,
) -> Result<EmbeddingVector> {
    let ct = backend
        .concept_text()
        .ok_or_else(|| crate::backend::concept_unsupported(backend.id()))?;
    ct.encode_concept_prompt(&concept.tokens, style_suffix)
}

// ---- persistence ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMeta {
    pub format_version: u32,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub suffix_used_in_training: String,
    pub seed: u64,
    pub backend_id: String,
}

const CONCEPT_META_FILE: &str = "concept.json";
const CONCEPT_DATA_FILE: &str = "concept.f32";

pub fn save_concept(
    concept: &ConceptEmbedding,
    dir: &Path,
    seed: u64,
    backend_id: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta = ConceptMeta {
        format_version: CONCEPT_FORMAT_VERSION,
        n_tokens: concept.n_tokens(),
        token_dim: concept.token_dim(),
        suffix_used_in_training: concept.suffix_used_in_training.clone(),
        seed,
        backend_id: backend_id.to_string(),
    };
    let meta_path = dir.join(CONCEPT_META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let data_path = dir.join(CONCEPT_DATA_FILE);
    let mut buf = Vec::with_capacity(concept.tokens.len() * 4);
    for v in concept.tokens.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(&data_path, buf).map_err(|e| Error::io(data_path.display().to_string(), e))
}

pub fn load_concept(dir: &Path) -> Result<(ConceptEmbedding, ConceptMeta)> {
    let meta_path = dir.join(CONCEPT_META_FILE);
    let meta: ConceptMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?,
    )
    .map_err(|e| Error::Json {
        path: meta_path.display().to_string(),
        source: e,
    })?;
    if meta.format_version != CONCEPT_FORMAT_VERSION {
        return Err(Error::format(
            meta_path.display().to_string(),
            format!("format_version {} unsupported", meta.format_version),
        ));
    }
    let data_path = dir.join(CONCEPT_DATA_FILE);
    let mut bytes = Vec::new();
    fs::File::open(&data_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(data_path.display().to_string(), e))?;
    let expected = meta.n_tokens * meta.token_dim * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            data_path.display().to_string(),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let tokens = Array2::from_shape_vec(
        (meta.n_tokens, meta.token_dim),
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    )
    .unwrap();
    Ok((ConceptEmbedding::new(tokens, meta.suffix_used_in_training.clone())?, meta))
}

/// Content hash of a persisted concept's token data.
pub fn concept_fingerprint(concept: &ConceptEmbedding) -> String {
    let mut bytes = Vec::with_capacity(concept.tokens.len() * 4);
    for v in concept.tokens.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    crate::adapt::hash_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ToyBackend;
    use ndarray::Array3;
    use rand::Rng;

    fn toy_embeddings(n: usize, seed: u64) -> Vec<EmbeddingVector> {
        let backend = ToyBackend::new();
        (0..n)
            .map(|i| {
                let mut rng = rng_for(seed, Stream::ToyData, 100 + i as u64);
                let img = Image::new(Array3::from_shape_fn((3, 64, 64), |_| {
                    rng.random_range(0.0..1.0)
                }))
                .unwrap();
                backend.embed_image(&img).unwrap()
            })
            .collect()
    }

    #[test]
    fn toy_backend_reports_capability_error() {
        let backend = ToyBackend::new();
        let images = vec![Image::new(Array3::from_elem((3, 64, 64), 0.5)).unwrap()];
        let cfg = ConceptConfig::toy_default(1);
        match optimize_concept(&images, DEFAULT_CONCEPT_SUFFIX, &cfg, &backend) {
            Err(Error::Capability { hint, .. }) => {
                assert!(hint.contains("surrogate"));
            }
            other => panic!("expected capability error, got {other:?}"),
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let embs = toy_embeddings(4, 2);
        let cfg = ConceptConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..ConceptConfig::toy_default(2)
        };
        let (v, _) = optimize_free_embedding(&embs, &cfg).unwrap();
        let cfg2 = ConceptConfig {
            epochs: 1,
            ..cfg
        };
        let (v2, _) = optimize_free_embedding(&embs, &cfg2).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn surrogate_descends_and_is_deterministic() {
        let embs = toy_embeddings(8, 3);
        let cfg = ConceptConfig {
            epochs: 10,
            ..ConceptConfig::toy_default(3)
        };
        let (va, ta) = optimize_free_embedding(&embs, &cfg).unwrap();
        let (vb, tb) = optimize_free_embedding(&embs, &cfg).unwrap();
        assert_eq!(va, vb);
        assert_eq!(ta, tb);
        assert!(ta.last().unwrap() <= ta.first().unwrap());
    }

    #[test]
    fn single_image_converges_monotonically() {
        let embs = toy_embeddings(1, 4);
        let cfg = ConceptConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 0.5,
            ..ConceptConfig::toy_default(4)
        };
        let (_, trajectory) = optimize_free_embedding(&embs, &cfg).unwrap();
        for w in trajectory.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "epoch loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(
            *trajectory.last().unwrap() < 0.01 * trajectory[0],
            "did not approach alignment: {} -> {}",
            trajectory[0],
            trajectory.last().unwrap()
        );
    }

    #[test]
    fn concept_roundtrip_and_fingerprint() {
        let tokens = Array2::from_shape_fn((2, 5), |(i, j)| (i * 5 + j) as f64 * 0.25 - 1.0);
        let concept = ConceptEmbedding::new(tokens, "at night").unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_concept(&concept, dir.path(), 7, "toy-v1").unwrap();
        let (loaded, meta) = load_concept(dir.path()).unwrap();
        assert_eq!(loaded.tokens, concept.tokens);
        assert_eq!(meta.backend_id, "toy-v1");
        assert_eq!(meta.n_tokens, 2);
        assert_eq!(concept_fingerprint(&loaded), concept_fingerprint(&concept));
    }
}
