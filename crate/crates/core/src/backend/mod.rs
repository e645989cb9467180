//! Joint vision-language encoder backends.
//!
//! A backend exposes two heads over one frozen trunk: a spatial feature path
//! for the segmenter (no pooling head) and an embedding path into the joint
//! space (with pooling head). Style mining differentiates through the
//! embedding path via [`EncoderBackend::embed_from_features_vjp`].

pub mod clip;
mod templates;
pub mod toy;

use ndarray::{Array1, Array2, Array3, Array4};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn;
use crate::types::{EmbeddingVector, FeatureMap, Image};

pub use templates::IMAGENET_TEMPLATES;
pub use toy::ToyBackend;

/// A named set of fill-in templates; `{}` marks the slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub name: String,
    pub templates: Vec<String>,
}

impl TemplateSet {
    /// Single identity template: the prompt is encoded as-is.
    pub fn single() -> Self {
        TemplateSet {
            name: "single".into(),
            templates: vec!["{}".into()],
        }
    }

    /// The 80 ImageNet templates.
    pub fn imagenet() -> Self {
        TemplateSet {
            name: "imagenet80".into(),
            templates: IMAGENET_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn render(&self, text: &str) -> Vec<String> {
        self.templates.iter().map(|t| t.replace("{}", text)).collect()
    }
}

/// A natural-language description of a target domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub templates: TemplateSet,
}

impl Prompt {
    pub fn new(text: impl Into<String>, templates: TemplateSet) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::validation("prompt text must be non-empty"));
        }
        Ok(Prompt { text, templates })
    }

    pub fn plain(text: impl Into<String>) -> Result<Self> {
        Prompt::new(text, TemplateSet::single())
    }
}

/// Text-side token injection for concept optimization. Only backends whose
/// text encoder consumes token embeddings can support this.
pub trait ConceptText {
    /// Width of one token embedding.
    fn token_dim(&self) -> usize;

    /// Std of the token-embedding table, used to scale random concept init.
    fn token_embedding_std(&self) -> f64;

    /// Token embeddings of a vocabulary word, if it tokenizes to >= 1 token.
    fn word_token_embeddings(&self, word: &str) -> Option<Array2<f64>>;

    /// Encode `concept tokens ++ tokenize(suffix)` through the frozen text
    /// encoder; output is unit-normalized.
    fn encode_concept_prompt(&self, tokens: &Array2<f64>, suffix: &str) -> Result<EmbeddingVector>;

    /// Forward as [`Self::encode_concept_prompt`] and pull the upstream
    /// gradient (computed from the forward output) back onto the concept
    /// tokens.
    fn encode_concept_prompt_vjp(
        &self,
        tokens: &Array2<f64>,
        suffix: &str,
        upstream: &dyn Fn(&EmbeddingVector) -> Array1<f64>,
    ) -> Result<(EmbeddingVector, Array2<f64>)>;
}

/// A frozen joint vision-language encoder.
pub trait EncoderBackend: Send + Sync {
    /// Stable identifier, recorded in every produced artifact. Encodes the
    /// preprocessing variant (and weight fingerprint where applicable) so
    /// artifacts are never silently reused across incompatible backends.
    fn id(&self) -> &str;

    /// Channel count of the low-level feature stage.
    fn feature_channels(&self) -> usize;

    /// Dimension of the joint embedding space.
    fn embedding_dim(&self) -> usize;

    /// The image resolution the backend expects after preprocessing.
    fn native_image_size(&self) -> (usize, usize);

    /// Low-level (first stage) activations of a preprocessed image.
    fn extract_low_features(&self, image: &Image) -> Result<FeatureMap>;

    /// Remaining trunk stages, spatial output, no pooling head. Feeds the
    /// segmenter's high-level input.
    fn forward_high_features(&self, low: &FeatureMap) -> Result<FeatureMap>;

    /// Remaining trunk stages plus the pooling/projection head.
    fn embed_from_features(&self, f: &FeatureMap) -> Result<EmbeddingVector>;

    /// Forward as [`Self::embed_from_features`], then pull back the upstream
    /// gradient (produced by the callback from the forward output) to the
    /// input features. One forward, one backward.
    fn embed_from_features_vjp(
        &self,
        f: &FeatureMap,
        upstream: &dyn Fn(&EmbeddingVector) -> Array1<f64>,
    ) -> Result<(EmbeddingVector, Array3<f64>)>;

    /// Full image-to-embedding forward. Must equal the composed
    /// `embed_from_features(extract_low_features(img))` path within 1e-4
    /// relative.
    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        let low = self.extract_low_features(image)?;
        self.embed_from_features(&low)
    }

    /// Encode one rendered string. Template averaging sits on top of this.
    fn encode_text_raw(&self, text: &str) -> Result<EmbeddingVector>;

    /// Render the prompt through every template, encode each, L2-normalize,
    /// average, and re-normalize the mean to unit norm.
    fn embed_text(&self, prompt: &Prompt) -> Result<EmbeddingVector> {
        if prompt.text.trim().is_empty() {
            return Err(Error::validation("prompt text must be non-empty"));
        }
        let mut acc = Array1::<f64>::zeros(self.embedding_dim());
        let rendered = prompt.templates.render(&prompt.text);
        if rendered.is_empty() {
            return Err(Error::validation("template set must be non-empty"));
        }
        for text in &rendered {
            let e = self.encode_text_raw(text)?;
            acc += &e.normalized().values().view();
        }
        acc /= rendered.len() as f64;
        EmbeddingVector::new(acc).map(|v| v.normalized())
    }

    /// Fingerprint of all frozen weights; lets callers assert the
    /// frozen-encoder contract across operations.
    fn weights_fingerprint(&self) -> u64;

    /// Token-injection surface for concept optimization, when supported.
    fn concept_text(&self) -> Option<&dyn ConceptText> {
        None
    }

    /// Trainable copy of the trunk stages above the low-level split, for the
    /// partial-unfreeze mode. `None` when unsupported; the low-level stage is
    /// never part of it.
    fn clone_upper_trunk(&self) -> Option<UpperTrunk> {
        None
    }
}

/// Capability error helper for backends without token injection.
pub(crate) fn concept_unsupported(backend: &str) -> Error {
    Error::Capability {
        backend: backend.to_string(),
        operation: "concept token injection",
        hint: "the toy text encoder is a lookup table; use the free-embedding concept surrogate",
    }
}

/// One conv + ReLU stage of a trainable upper trunk.
#[derive(Debug, Clone)]
pub struct ConvStage {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

/// Trainable copy of the trunk stages above the frozen low-level stage.
/// Used by the partial-unfreeze fine-tuning mode.
#[derive(Debug, Clone)]
pub struct UpperTrunk {
    pub stages: Vec<ConvStage>,
}

impl UpperTrunk {
    pub fn forward(&self, low: &Array3<f64>) -> Array3<f64> {
        let mut x = low.clone();
        for s in &self.stages {
            x = nn::relu(&nn::conv2d(&x, &s.weight, Some(&s.bias), s.stride, s.pad));
        }
        x
    }

    /// Forward keeping pre-activations, then backward from `grad_out` to
    /// per-stage weight/bias gradients.
    pub fn forward_backward(
        &self,
        low: &Array3<f64>,
        grad_out: &Array3<f64>,
    ) -> (Array3<f64>, Vec<(Array4<f64>, Array1<f64>)>) {
        let mut inputs = vec![low.clone()];
        let mut preacts = Vec::new();
        for s in &self.stages {
            let z = nn::conv2d(inputs.last().unwrap(), &s.weight, Some(&s.bias), s.stride, s.pad);
            inputs.push(nn::relu(&z));
            preacts.push(z);
        }
        let out = inputs.last().unwrap().clone();
        let mut grads = vec![];
        let mut g = grad_out.clone();
        for (i, s) in self.stages.iter().enumerate().rev() {
            let gz = nn::relu_backward(&g, &preacts[i]);
            let (gw, gb) = conv_grads(&gz, &inputs[i], s);
            grads.push((gw, gb));
            if i > 0 {
                g = nn::conv2d_backward_input(&gz, &s.weight, inputs[i].dim(), s.stride, s.pad);
            }
        }
        grads.reverse();
        (out, grads)
    }
}

fn conv_grads(gz: &Array3<f64>, input: &Array3<f64>, s: &ConvStage) -> (Array4<f64>, Array1<f64>) {
    let k = (s.weight.dim().2, s.weight.dim().3);
    nn::conv2d_backward_params(gz, input, k, s.stride, s.pad)
}

/// Hash a sequence of f64 slices into a 64-bit fingerprint.
pub fn fingerprint_params<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        for v in part {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Mean of unit-normalized image embeddings, re-normalized. Serves as the
/// target embedding for the photo-driven toy end-to-end experiment.
pub fn mean_image_embedding(
    backend: &dyn EncoderBackend,
    images: &[Image],
) -> Result<EmbeddingVector> {
    if images.is_empty() {
        return Err(Error::validation("need at least one image for a mean embedding"));
    }
    let mut acc = Array1::<f64>::zeros(self::dim_of(backend));
    for img in images {
        acc += &backend.embed_image(img)?.normalized().values().view();
    }
    acc /= images.len() as f64;
    EmbeddingVector::new(acc).map(|v| v.normalized())
}

fn dim_of(backend: &dyn EncoderBackend) -> usize {
    backend.embedding_dim()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_render_fills_slot() {
        let t = TemplateSet::imagenet();
        assert_eq!(t.templates.len(), 80);
        let rendered = t.render("driving at night");
        assert!(rendered.iter().all(|r| r.contains("driving at night")));
        assert!(!rendered.iter().any(|r| r.contains("{}")));
    }

    #[test]
    fn empty_prompt_rejected() {
        assert!(Prompt::plain("").is_err());
        assert!(Prompt::plain("  ").is_err());
        assert!(Prompt::plain("night").is_ok());
    }

    #[test]
    fn fingerprint_sensitive_to_values() {
        let a = [1.0f64, 2.0, 3.0];
        let b = [1.0f64, 2.0, 3.000001];
        assert_ne!(fingerprint_params([&a[..]]), fingerprint_params([&b[..]]));
        assert_eq!(fingerprint_params([&a[..]]), fingerprint_params([&a[..]]));
    }
}
