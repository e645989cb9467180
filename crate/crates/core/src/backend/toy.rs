//! Deterministic seeded toy backend for desk-scale verification.
//!
//! Image trunk: conv(3 -> 8, k3, s2, ReLU) as the low-level stage, then
//! conv(8 -> 16, k3, s2, ReLU); embedding head: spatial mean followed by a
//! fixed 16 -> 16 linear layer. All weights are drawn once from a seeded
//! generator and frozen. The text side is a lookup table over a finite
//! prompt vocabulary.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::rng::{rng_for, Stream};
use crate::types::{EmbeddingVector, FeatureMap, Image};

use super::{fingerprint_params, ConvStage, EncoderBackend, UpperTrunk};

pub const TOY_IMAGE_SIZE: usize = 64;
pub const TOY_FEATURE_CHANNELS: usize = 8;
pub const TOY_HIGH_CHANNELS: usize = 16;
pub const TOY_EMBED_DIM: usize = 16;
const TOY_WEIGHT_SEED: u64 = 1234;

/// Prompts the toy text table knows about.
pub const TOY_TEXT_VOCABULARY: [&str; 8] = [
    "toy day",
    "toy night",
    "toy snow",
    "driving",
    "driving at night",
    "driving in snow",
    "driving under rain",
    "driving in a game",
];

pub struct ToyBackend {
    id: String,
    conv1_w: Array4<f64>,
    conv1_b: Array1<f64>,
    conv2_w: Array4<f64>,
    conv2_b: Array1<f64>,
    proj_w: Array2<f64>,
    proj_b: Array1<f64>,
    text_table: Vec<(String, Array1<f64>)>,
    fingerprint: u64,
}

fn draw3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), std: f64) -> Array4<f64> {
    Array4::from_shape_fn(shape, |_| standard_normal(rng) * std)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps us independent of distribution-crate stream details
    // for the frozen weights.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl ToyBackend {
    pub fn new() -> Self {
        let mut rng = rng_for(TOY_WEIGHT_SEED, Stream::ToyWeights, 0);
        let conv1_w = draw3(&mut rng, (8, 3, 3, 3), 1.0 / (3.0 * 9.0f64).sqrt());
        let conv1_b = Array1::from_shape_fn(8, |_| standard_normal(&mut rng) * 0.1);
        let conv2_w = draw3(&mut rng, (16, 8, 3, 3), 1.0 / (8.0 * 9.0f64).sqrt());
        let conv2_b = Array1::from_shape_fn(16, |_| standard_normal(&mut rng) * 0.1);
        let proj_w = Array2::from_shape_fn((16, 16), |_| standard_normal(&mut rng) * (1.0 / 4.0));
        let proj_b = Array1::from_shape_fn(16, |_| standard_normal(&mut rng) * 0.1);

        let mut table_rng = rng_for(TOY_WEIGHT_SEED, Stream::ToyTextTable, 0);
        let text_table = TOY_TEXT_VOCABULARY
            .iter()
            .map(|p| {
                let v = Array1::from_shape_fn(TOY_EMBED_DIM, |_| standard_normal(&mut table_rng));
                let n = v.dot(&v).sqrt();
                (p.to_string(), v / n)
            })
            .collect();

        let fingerprint = fingerprint_params([
            conv1_w.as_slice().unwrap(),
            conv1_b.as_slice().unwrap(),
            conv2_w.as_slice().unwrap(),
            conv2_b.as_slice().unwrap(),
            proj_w.as_slice().unwrap(),
            proj_b.as_slice().unwrap(),
        ]);

        ToyBackend {
            id: format!("toy-v1-seed{TOY_WEIGHT_SEED}-{TOY_IMAGE_SIZE}x{TOY_IMAGE_SIZE}"),
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            proj_w,
            proj_b,
            text_table,
            fingerprint,
        }
    }

    /// Pixels in [0,1] are shifted to [-1,1] before the trunk.
    fn preprocess(&self, image: &Image) -> Array3<f64> {
        image.values().mapv(|v| v * 2.0 - 1.0)
    }

    fn embed_forward(&self, f: &FeatureMap) -> (Array3<f64>, Array1<f64>) {
        let z = nn::conv2d(f.values(), &self.conv2_w, Some(&self.conv2_b), 2, 1);
        let a = nn::relu(&z);
        let pooled = nn::spatial_mean(&a);
        let e = nn::linear(&pooled, &self.proj_w, Some(&self.proj_b));
        (z, e)
    }

    fn check_feature_shape(&self, f: &FeatureMap) -> Result<()> {
        let expect = (TOY_FEATURE_CHANNELS, TOY_IMAGE_SIZE / 2, TOY_IMAGE_SIZE / 2);
        if f.shape() != expect {
            return Err(Error::ShapeMismatch {
                context: "toy features",
                expected: format!("{expect:?}"),
                actual: format!("{:?}", f.shape()),
            });
        }
        Ok(())
    }
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl EncoderBackend for ToyBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn feature_channels(&self) -> usize {
        TOY_FEATURE_CHANNELS
    }

    fn embedding_dim(&self) -> usize {
        TOY_EMBED_DIM
    }

    fn native_image_size(&self) -> (usize, usize) {
        (TOY_IMAGE_SIZE, TOY_IMAGE_SIZE)
    }

    fn extract_low_features(&self, image: &Image) -> Result<FeatureMap> {
        if (image.height(), image.width()) != (TOY_IMAGE_SIZE, TOY_IMAGE_SIZE) {
            return Err(Error::validation(format!(
                "toy backend expects {TOY_IMAGE_SIZE}x{TOY_IMAGE_SIZE} images, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        let x = self.preprocess(image);
        let z = nn::conv2d(&x, &self.conv1_w, Some(&self.conv1_b), 2, 1);
        FeatureMap::new(nn::relu(&z))
    }

    fn forward_high_features(&self, low: &FeatureMap) -> Result<FeatureMap> {
        self.check_feature_shape(low)?;
        let z = nn::conv2d(low.values(), &self.conv2_w, Some(&self.conv2_b), 2, 1);
        Ok(FeatureMap::from_raw(nn::relu(&z)))
    }

    fn embed_from_features(&self, f: &FeatureMap) -> Result<EmbeddingVector> {
        self.check_feature_shape(f)?;
        let (_, e) = self.embed_forward(f);
        EmbeddingVector::new(e)
    }

    fn embed_from_features_vjp(
        &self,
        f: &FeatureMap,
        upstream: &dyn Fn(&EmbeddingVector) -> Array1<f64>,
    ) -> Result<(EmbeddingVector, Array3<f64>)> {
        self.check_feature_shape(f)?;
        let (z, e) = self.embed_forward(f);
        let e = EmbeddingVector::new(e)?;
        let grad_e = upstream(&e);
        let grad_pooled = nn::linear_backward_input(&grad_e, &self.proj_w);
        let grad_act = nn::spatial_mean_backward(&grad_pooled, z.dim());
        let grad_z = nn::relu_backward(&grad_act, &z);
        let grad_f = nn::conv2d_backward_input(&grad_z, &self.conv2_w, f.values().dim(), 2, 1);
        Ok((e, grad_f))
    }

    fn encode_text_raw(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::validation("prompt text must be non-empty"));
        }
        self.text_table
            .iter()
            .find(|(k, _)| k == text)
            .map(|(_, v)| EmbeddingVector::new(v.clone()).expect("table vectors are unit"))
            .ok_or_else(|| Error::UnknownToyPrompt(text.to_string()))
    }

    fn weights_fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn clone_upper_trunk(&self) -> Option<UpperTrunk> {
        Some(UpperTrunk {
            stages: vec![ConvStage {
                weight: self.conv2_w.clone(),
                bias: self.conv2_b.clone(),
                stride: 2,
                pad: 1,
            }],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::backend::Prompt;

    fn toy_image(seed: u64) -> Image {
        let mut rng = rng_for(seed, Stream::ToyData, 0);
        Image::new(Array3::from_shape_fn(
            (3, TOY_IMAGE_SIZE, TOY_IMAGE_SIZE),
            |_| rng.random_range(0.0..1.0),
        ))
        .unwrap()
    }

    #[test]
    fn feature_and_embedding_shapes() {
        let b = ToyBackend::new();
        let f = b.extract_low_features(&toy_image(0)).unwrap();
        assert_eq!(f.shape(), (8, 32, 32));
        let e = b.embed_from_features(&f).unwrap();
        assert_eq!(e.len(), 16);
        let high = b.forward_high_features(&f).unwrap();
        assert_eq!(high.shape(), (16, 16, 16));
    }

    #[test]
    fn wrong_resolution_rejected() {
        let b = ToyBackend::new();
        let img = Image::new(Array3::zeros((3, 32, 32))).unwrap();
        assert!(b.extract_low_features(&img).is_err());
    }

    #[test]
    fn determinism_across_instances() {
        let b1 = ToyBackend::new();
        let b2 = ToyBackend::new();
        let img = toy_image(5);
        let f1 = b1.extract_low_features(&img).unwrap();
        let f2 = b2.extract_low_features(&img).unwrap();
        assert_eq!(f1.values(), f2.values());
        assert_eq!(b1.weights_fingerprint(), b2.weights_fingerprint());
    }

    #[test]
    fn path_consistency() {
        let b = ToyBackend::new();
        let img = toy_image(9);
        let full = b.embed_image(&img).unwrap();
        let composed = b
            .embed_from_features(&b.extract_low_features(&img).unwrap())
            .unwrap();
        for (a, c) in full.values().iter().zip(composed.values().iter()) {
            let tol = 1e-4 * c.abs().max(1e-8);
            assert!((a - c).abs() <= tol);
        }
        assert!(full.norm() > 0.0);
    }

    #[test]
    fn text_table_lookup_and_unknown_prompt() {
        let b = ToyBackend::new();
        let e = b.encode_text_raw("toy night").unwrap();
        assert_abs_diff_eq!(e.norm(), 1.0, epsilon = 1e-12);
        assert!(matches!(
            b.encode_text_raw("no such prompt"),
            Err(Error::UnknownToyPrompt(_))
        ));
    }

    #[test]
    fn embed_text_single_template_equals_raw() {
        let b = ToyBackend::new();
        let p = Prompt::plain("driving at night").unwrap();
        let via_templates = b.embed_text(&p).unwrap();
        let raw = b.encode_text_raw("driving at night").unwrap();
        for (x, y) in via_templates.values().iter().zip(raw.values().iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(via_templates.norm(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let b = ToyBackend::new();
        let f = b.extract_low_features(&toy_image(11)).unwrap();
        let target = b.encode_text_raw("toy night").unwrap();
        let loss_of = |fm: &FeatureMap| {
            let e = b.embed_from_features(fm).unwrap();
            crate::stats::cosine_distance(&e, &target).unwrap()
        };
        let (_, grad) = b
            .embed_from_features_vjp(&f, &|e| {
                crate::stats::cosine_distance_with_grad(e, &target).unwrap().1
            })
            .unwrap();
        let h = 1e-5;
        for idx in [[0, 0, 0], [3, 10, 20], [7, 31, 31], [2, 16, 5]] {
            let mut plus = f.values().clone();
            plus[idx] += h;
            let mut minus = f.values().clone();
            minus[idx] -= h;
            let fd = (loss_of(&FeatureMap::from_raw(plus)) - loss_of(&FeatureMap::from_raw(minus)))
                / (2.0 * h);
            assert_abs_diff_eq!(grad[idx], fd, epsilon = 1e-7);
        }
    }
}
