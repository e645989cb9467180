//! Reference adapter over a contrastive vision-language model with a
//! modified-ResNet image tower: the segmentation feature path drops the
//! attention-pooling head, the embedding path keeps it, both over one set
//! of frozen weights.
//!
//! Weights load from a directory (``model.json`` + ``model.f32`` +
//! ``vocab.json`` + ``merges.txt``) resolved via the config or the
//! `PINADAPT_MODEL_DIR` environment variable; tensor names follow the
//! public state_dict naming, so conversion is a direct dump.

mod attnpool;
mod text;
mod tokenizer;
mod vision;
pub mod weights;

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::types::{EmbeddingVector, FeatureMap, Image};

use self::attnpool::AttentionPool;
use self::text::TextTransformer;
use self::vision::VisionTrunk;
pub use self::tokenizer::BpeTokenizer;
pub use self::weights::{ClipConfig, TensorStore};

use super::{ConceptText, EncoderBackend};

/// Published pixel normalization of the reference model.
const PIXEL_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const PIXEL_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

pub struct ClipBackend {
    id: String,
    config: ClipConfig,
    vision: VisionTrunk,
    attnpool: AttentionPool,
    text: TextTransformer,
    tokenizer: BpeTokenizer,
    fingerprint: u64,
}

impl ClipBackend {
    /// Load converted weights for the named architecture ("clip-rn50" or
    /// "clip-rn101") from `dir`.
    pub fn load(dir: &Path, architecture: &str) -> Result<Self> {
        let store = TensorStore::load(dir)?;
        let expected = ClipConfig::for_architecture(architecture)?;
        if store.config != expected {
            return Err(Error::Config(format!(
                "weights in {} declare a different architecture than '{architecture}'",
                dir.display()
            )));
        }
        let tokenizer = BpeTokenizer::load(dir)?;
        Self::from_store(store, tokenizer, architecture)
    }

    /// Build a backend with seeded random weights and the built-in test
    /// vocabulary. Exercises exactly the production code paths; meant for
    /// tests and benchmarks, not for meaningful embeddings.
    pub fn synthetic(config: ClipConfig, architecture: &str, seed: u64) -> Result<Self> {
        let tensors = synthesize_tensors(&config, seed);
        let store = TensorStore::from_tensors(architecture, config, tensors);
        Self::from_store(store, BpeTokenizer::ascii_test_vocabulary(), architecture)
    }

    fn from_store(store: TensorStore, tokenizer: BpeTokenizer, architecture: &str) -> Result<Self> {
        let fingerprint = store.fingerprint();
        let config = store.config.clone();
        let vision = VisionTrunk::load(&store, &config.vision)?;
        let attnpool = AttentionPool::load(&store, config.vision.heads)?;
        let text = TextTransformer::load(&store, &config.text)?;
        let res = config.vision.image_resolution;
        if res % 32 != 0 {
            return Err(Error::Config(format!(
                "image resolution {res} must be divisible by 32"
            )));
        }
        Ok(ClipBackend {
            id: format!("{architecture}-{fingerprint:016x}+openai-norm@{res}"),
            config,
            vision,
            attnpool,
            text,
            tokenizer,
            fingerprint,
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.config
    }

    fn preprocess(&self, image: &Image) -> Array3<f64> {
        let mut x = image.values().clone();
        for (c, mut plane) in x.axis_iter_mut(ndarray::Axis(0)).enumerate() {
            plane.mapv_inplace(|v| (v - PIXEL_MEAN[c]) / PIXEL_STD[c]);
        }
        x
    }

    fn low_shape(&self) -> (usize, usize, usize) {
        let r = self.config.vision.image_resolution / 4;
        (self.vision.low_channels, r, r)
    }

    fn check_feature_shape(&self, f: &FeatureMap) -> Result<()> {
        if f.shape() != self.low_shape() {
            return Err(Error::ShapeMismatch {
                context: "reference backend features",
                expected: format!("{:?}", self.low_shape()),
                actual: format!("{:?}", f.shape()),
            });
        }
        Ok(())
    }

    /// Token-id sequence `[SOT] text [EOT]`, truncated to the context window
    /// with the end marker kept in place.
    fn prompt_ids(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = self.tokenizer.encode_prompt(text)?;
        let ctx = self.config.text.context_length;
        if ids.len() > ctx {
            ids.truncate(ctx);
            ids[ctx - 1] = self.tokenizer.eot_id;
        }
        Ok(ids)
    }

    /// Input-embedding rows for `concept ++ tokenize(suffix)` bracketed by
    /// the start/end markers. Returns the rows plus the concept slot range.
    fn concept_rows(
        &self,
        tokens: &Array2<f64>,
        suffix: &str,
    ) -> Result<(Array2<f64>, std::ops::Range<usize>)> {
        if tokens.dim().1 != self.text.width() {
            return Err(Error::ShapeMismatch {
                context: "concept tokens",
                expected: format!("width {}", self.text.width()),
                actual: format!("width {}", tokens.dim().1),
            });
        }
        let suffix_ids = if suffix.trim().is_empty() {
            vec![]
        } else {
            self.tokenizer.encode_text(suffix)?
        };
        let n = tokens.dim().0;
        let total = 1 + n + suffix_ids.len() + 1;
        if total > self.config.text.context_length {
            return Err(Error::validation(format!(
                "concept prompt of {total} tokens exceeds context length {}",
                self.config.text.context_length
            )));
        }
        let w = self.text.width();
        let mut rows = Array2::<f64>::zeros((total, w));
        rows.row_mut(0)
            .assign(&self.text.token_embedding.row(self.tokenizer.sot_id));
        for i in 0..n {
            rows.row_mut(1 + i).assign(&tokens.row(i));
        }
        for (i, id) in suffix_ids.iter().enumerate() {
            rows.row_mut(1 + n + i).assign(&self.text.token_embedding.row(*id));
        }
        rows.row_mut(total - 1)
            .assign(&self.text.token_embedding.row(self.tokenizer.eot_id));
        Ok((rows, 1..1 + n))
    }
}

impl EncoderBackend for ClipBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn feature_channels(&self) -> usize {
        self.vision.low_channels
    }

    fn embedding_dim(&self) -> usize {
        self.attnpool.output_dim()
    }

    fn native_image_size(&self) -> (usize, usize) {
        let r = self.config.vision.image_resolution;
        (r, r)
    }

    fn extract_low_features(&self, image: &Image) -> Result<FeatureMap> {
        let res = self.config.vision.image_resolution;
        if (image.height(), image.width()) != (res, res) {
            return Err(Error::validation(format!(
                "backend expects {res}x{res} inputs, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        FeatureMap::new(self.vision.forward_low(&self.preprocess(image)))
    }

    fn forward_high_features(&self, low: &FeatureMap) -> Result<FeatureMap> {
        self.check_feature_shape(low)?;
        Ok(FeatureMap::from_raw(self.vision.forward_high(low.values())))
    }

    fn embed_from_features(&self, f: &FeatureMap) -> Result<EmbeddingVector> {
        self.check_feature_shape(f)?;
        let high = self.vision.forward_high(f.values());
        EmbeddingVector::new(self.attnpool.forward(&high))
    }

    fn embed_from_features_vjp(
        &self,
        f: &FeatureMap,
        upstream: &dyn Fn(&EmbeddingVector) -> Array1<f64>,
    ) -> Result<(EmbeddingVector, Array3<f64>)> {
        self.check_feature_shape(f)?;
        let (high, caches) = self.vision.forward_high_cached(f.values());
        let (out, pool_cache) = self.attnpool.forward_cached(&high);
        let embedding = EmbeddingVector::new(out)?;
        let grad_emb = upstream(&embedding);
        let grad_high = self.attnpool.backward(&pool_cache, &grad_emb);
        let grad_low = self.vision.backward_high(&caches, &grad_high);
        Ok((embedding, grad_low))
    }

    fn encode_text_raw(&self, prompt_text: &str) -> Result<EmbeddingVector> {
        if prompt_text.trim().is_empty() {
            return Err(Error::validation("prompt text must be non-empty"));
        }
        let ids = self.prompt_ids(prompt_text)?;
        let rows = self.text.embed_rows(&ids)?;
        let out = self.text.forward_embeddings(&rows, ids.len() - 1)?;
        EmbeddingVector::new(out)
    }

    fn weights_fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn concept_text(&self) -> Option<&dyn ConceptText> {
        Some(self)
    }
}

impl ConceptText for ClipBackend {
    fn token_dim(&self) -> usize {
        self.text.width()
    }

    fn token_embedding_std(&self) -> f64 {
        self.text.token_std
    }

    fn word_token_embeddings(&self, word: &str) -> Option<Array2<f64>> {
        let ids = self.tokenizer.encode_text(word).ok()?;
        if ids.is_empty() {
            return None;
        }
        self.text.embed_rows(&ids).ok()
    }

    fn encode_concept_prompt(&self, tokens: &Array2<f64>, suffix: &str) -> Result<EmbeddingVector> {
        let (rows, _) = self.concept_rows(tokens, suffix)?;
        let out = self.text.forward_embeddings(&rows, rows.dim().0 - 1)?;
        EmbeddingVector::new(out).map(|e| e.normalized())
    }

    fn encode_concept_prompt_vjp(
        &self,
        tokens: &Array2<f64>,
        suffix: &str,
        upstream: &dyn Fn(&EmbeddingVector) -> Array1<f64>,
    ) -> Result<(EmbeddingVector, Array2<f64>)> {
        let (rows, slot) = self.concept_rows(tokens, suffix)?;
        let eot = rows.dim().0 - 1;
        let (raw, cache) = self.text.forward_cached(&rows, eot)?;
        let raw_emb = EmbeddingVector::new(raw.clone())?;
        let norm = raw_emb.norm();
        let unit = raw_emb.normalized();
        let g_unit = upstream(&unit);
        // back through y = f / |f|
        let y = unit.values();
        let coeff = y.dot(&g_unit);
        let g_raw = (&g_unit - &(y * coeff)) / norm;
        let g_rows = self.text.backward(&cache, &g_raw, slot);
        Ok((unit, g_rows))
    }
}

/// Seeded random tensors matching the architecture layout, with sane scales
/// so forward activations stay O(1).
fn synthesize_tensors(cfg: &ClipConfig, seed: u64) -> HashMap<String, ArrayD<f64>> {
    use crate::rng::{rng_for, Stream};
    use rand::Rng;

    let mut rng = rng_for(seed, Stream::ToyWeights, 1);
    let mut tensors: HashMap<String, ArrayD<f64>> = HashMap::new();
    let mut normal = move |std: f64| {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    };

    let mut conv = |t: &mut HashMap<String, ArrayD<f64>>,
                    name: &str,
                    out: usize,
                    inp: usize,
                    k: usize,
                    normal: &mut dyn FnMut(f64) -> f64| {
        let std = (2.0 / (inp * k * k) as f64).sqrt();
        t.insert(
            format!("{name}.weight"),
            ArrayD::from_shape_fn(IxDyn(&[out, inp, k, k]), |_| normal(std)),
        );
    };
    let mut bn = |t: &mut HashMap<String, ArrayD<f64>>,
                  name: &str,
                  c: usize,
                  normal: &mut dyn FnMut(f64) -> f64| {
        t.insert(
            format!("{name}.weight"),
            ArrayD::from_shape_fn(IxDyn(&[c]), |_| 1.0 + normal(0.05)),
        );
        t.insert(
            format!("{name}.bias"),
            ArrayD::from_shape_fn(IxDyn(&[c]), |_| normal(0.05)),
        );
        t.insert(
            format!("{name}.running_mean"),
            ArrayD::from_shape_fn(IxDyn(&[c]), |_| normal(0.1)),
        );
        t.insert(
            format!("{name}.running_var"),
            ArrayD::from_shape_fn(IxDyn(&[c]), |_| 1.0 + normal(0.1).abs()),
        );
    };
    let mut linear = |t: &mut HashMap<String, ArrayD<f64>>,
                      name: &str,
                      out: usize,
                      inp: usize,
                      normal: &mut dyn FnMut(f64) -> f64| {
        let std = (1.0 / inp as f64).sqrt();
        t.insert(
            format!("{name}.weight"),
            ArrayD::from_shape_fn(IxDyn(&[out, inp]), |_| normal(std)),
        );
        t.insert(
            format!("{name}.bias"),
            ArrayD::from_shape_fn(IxDyn(&[out]), |_| normal(0.02)),
        );
    };

    let w = cfg.vision.width;
    conv(&mut tensors, "visual.conv1", w / 2, 3, 3, &mut normal);
    bn(&mut tensors, "visual.bn1", w / 2, &mut normal);
    conv(&mut tensors, "visual.conv2", w / 2, w / 2, 3, &mut normal);
    bn(&mut tensors, "visual.bn2", w / 2, &mut normal);
    conv(&mut tensors, "visual.conv3", w, w / 2, 3, &mut normal);
    bn(&mut tensors, "visual.bn3", w, &mut normal);

    let mut inplanes = w;
    for (si, blocks) in cfg.vision.blocks.iter().enumerate() {
        let planes = w << si;
        for bi in 0..*blocks {
            let prefix = format!("visual.layer{}.{}", si + 1, bi);
            let inp = if bi == 0 { inplanes } else { planes * 4 };
            conv(&mut tensors, &format!("{prefix}.conv1"), planes, inp, 1, &mut normal);
            bn(&mut tensors, &format!("{prefix}.bn1"), planes, &mut normal);
            conv(&mut tensors, &format!("{prefix}.conv2"), planes, planes, 3, &mut normal);
            bn(&mut tensors, &format!("{prefix}.bn2"), planes, &mut normal);
            conv(&mut tensors, &format!("{prefix}.conv3"), planes * 4, planes, 1, &mut normal);
            bn(&mut tensors, &format!("{prefix}.bn3"), planes * 4, &mut normal);
            if bi == 0 {
                conv(
                    &mut tensors,
                    &format!("{prefix}.downsample.0"),
                    planes * 4,
                    inp,
                    1,
                    &mut normal,
                );
                bn(&mut tensors, &format!("{prefix}.downsample.1"), planes * 4, &mut normal);
            }
        }
        inplanes = planes * 4;
    }

    let embed = w * 32;
    let grid = cfg.vision.image_resolution / 32;
    tensors.insert(
        "visual.attnpool.positional_embedding".into(),
        ArrayD::from_shape_fn(IxDyn(&[grid * grid + 1, embed]), |_| {
            normal(1.0 / (embed as f64).sqrt())
        }),
    );
    linear(&mut tensors, "visual.attnpool.q_proj", embed, embed, &mut normal);
    linear(&mut tensors, "visual.attnpool.k_proj", embed, embed, &mut normal);
    linear(&mut tensors, "visual.attnpool.v_proj", embed, embed, &mut normal);
    linear(
        &mut tensors,
        "visual.attnpool.c_proj",
        cfg.vision.output_dim,
        embed,
        &mut normal,
    );

    let tw = cfg.text.width;
    tensors.insert(
        "token_embedding.weight".into(),
        ArrayD::from_shape_fn(IxDyn(&[cfg.text.vocab_size, tw]), |_| normal(0.02)),
    );
    tensors.insert(
        "positional_embedding".into(),
        ArrayD::from_shape_fn(IxDyn(&[cfg.text.context_length, tw]), |_| normal(0.01)),
    );
    for i in 0..cfg.text.layers {
        let prefix = format!("transformer.resblocks.{i}");
        for ln in ["ln_1", "ln_2"] {
            tensors.insert(
                format!("{prefix}.{ln}.weight"),
                ArrayD::from_shape_fn(IxDyn(&[tw]), |_| 1.0 + normal(0.02)),
            );
            tensors.insert(
                format!("{prefix}.{ln}.bias"),
                ArrayD::from_shape_fn(IxDyn(&[tw]), |_| normal(0.02)),
            );
        }
        tensors.insert(
            format!("{prefix}.attn.in_proj_weight"),
            ArrayD::from_shape_fn(IxDyn(&[3 * tw, tw]), |_| normal((1.0 / tw as f64).sqrt())),
        );
        tensors.insert(
            format!("{prefix}.attn.in_proj_bias"),
            ArrayD::from_shape_fn(IxDyn(&[3 * tw]), |_| normal(0.02)),
        );
        linear(&mut tensors, &format!("{prefix}.attn.out_proj"), tw, tw, &mut normal);
        linear(&mut tensors, &format!("{prefix}.mlp.c_fc"), 4 * tw, tw, &mut normal);
        linear(&mut tensors, &format!("{prefix}.mlp.c_proj"), tw, 4 * tw, &mut normal);
    }
    tensors.insert(
        "ln_final.weight".into(),
        ArrayD::from_shape_fn(IxDyn(&[tw]), |_| 1.0 + normal(0.02)),
    );
    tensors.insert(
        "ln_final.bias".into(),
        ArrayD::from_shape_fn(IxDyn(&[tw]), |_| normal(0.02)),
    );
    tensors.insert(
        "text_projection".into(),
        ArrayD::from_shape_fn(IxDyn(&[tw, cfg.vision.output_dim]), |_| {
            normal((1.0 / tw as f64).sqrt())
        }),
    );
    tensors
}
