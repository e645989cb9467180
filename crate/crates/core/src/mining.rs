//! Style mining: per-instance optimization of (mu, sigma) by momentum
//! gradient descent on the cosine distance between the stylized feature's
//! embedding and a single target embedding, plus the persisted style bank.
//!
//! Each source instance owns its parameters; gradients never couple
//! instances, so a batch of any size mines the same styles as instance-by-
//! instance runs, and the bank is embarrassingly parallel.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::backend::EncoderBackend;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{rng_for, Stream};
use crate::stats::{channel_stats, cosine_distance, cosine_distance_with_grad, normalized_values};
use crate::types::{EmbeddingVector, FeatureMap, StatsEpsilon, StyleStats};

pub const BANK_FORMAT_VERSION: u32 = 1;

/// Initialization of the optimizable statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StyleInit {
    /// Start from the source feature's own statistics (the default; acts as
    /// regularization because no loss regularizer is used).
    #[default]
    SourceStats,
    /// mu = 0, sigma = 1.
    ZeroOne,
    /// Both vectors drawn from a seeded standard normal.
    RandomNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Number of gradient-descent steps per instance.
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Scheduling granularity only; never affects mined values.
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: StyleInit,
}

impl MiningConfig {
    /// Reference-scale defaults: 100 iterations, lr 1.0, momentum 0.9,
    /// batches of 16 feature instances.
    pub fn reference_default(seed: u64) -> Self {
        MiningConfig {
            iterations: 100,
            learning_rate: 1.0,
            momentum: 0.9,
            batch_size: 16,
            seed,
            init: StyleInit::SourceStats,
        }
    }

    /// Learning rate retuned for the toy backend's feature scale.
    pub fn toy_default(seed: u64) -> Self {
        MiningConfig {
            learning_rate: 0.02,
            ..Self::reference_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("mining learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("mining momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("mining batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Result of mining one instance.
#[derive(Debug, Clone)]
pub struct MinedStyle {
    pub stats: StyleStats,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn initial_params(
    f: &FeatureMap,
    init: StyleInit,
    seed: u64,
    instance: u64,
    eps: StatsEpsilon,
) -> StyleStats {
    match init {
        StyleInit::SourceStats => channel_stats(f, eps),
        StyleInit::ZeroOne => StyleStats {
            mu: Array1::zeros(f.channels()),
            sigma: Array1::ones(f.channels()),
        },
        StyleInit::RandomNormal => {
            let mut rng = rng_for(seed, Stream::MiningInit, instance);
            let mut draw = |n: usize| {
                Array1::from_shape_fn(n, |_| {
                    use rand::Rng;
                    // Box-Muller on the ChaCha stream
                    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
            };
            StyleStats {
                mu: draw(f.channels()),
                sigma: draw(f.channels()),
            }
        }
    }
}

/// Mine one style from one source feature instance.
pub fn mine_style(
    f_s: &FeatureMap,
    target_emb: &EmbeddingVector,
    cfg: &MiningConfig,
    backend: &dyn EncoderBackend,
) -> Result<MinedStyle> {
    mine_style_indexed(f_s, target_emb, cfg, backend, 0)
}

/// As [`mine_style`] with an explicit instance index, which seeds the
/// random-normal initialization inside a bank run.
pub fn mine_style_indexed(
    f_s: &FeatureMap,
    target_emb: &EmbeddingVector,
    cfg: &MiningConfig,
    backend: &dyn EncoderBackend,
    instance: u64,
) -> Result<MinedStyle> {
    cfg.validate()?;
    if target_emb.len() != backend.embedding_dim() {
        return Err(Error::ShapeMismatch {
            context: "mine_style target embedding",
            expected: format!("dim {}", backend.embedding_dim()),
            actual: format!("dim {}", target_emb.len()),
        });
    }
    let eps = StatsEpsilon::default();
    // The normalized content is fixed for the whole optimization: the
    // stylized feature is linear in (mu, sigma) given this tensor.
    let content = normalized_values(f_s, eps);
    let mut params = initial_params(f_s, cfg.init, cfg.seed, instance, eps);

    let mut velocity_mu = Array1::<f64>::zeros(params.len());
    let mut velocity_sigma = Array1::<f64>::zeros(params.len());
    let mut initial_loss = None;

    for iter in 1..=cfg.iterations {
        let stylized = FeatureMap::from_raw(restyle(&content, &params));
        let (embedded, grad_f) = backend.embed_from_features_vjp(&stylized, &|e| {
            cosine_distance_with_grad(e, target_emb)
                .map(|(_, g)| g)
                .unwrap_or_else(|_| Array1::zeros(e.len()))
        })?;
        let loss = cosine_distance(&embedded, target_emb)?;
        if !loss.is_finite() {
            return Err(Error::MiningDiverged {
                iteration: iter,
                what: "loss",
            });
        }
        initial_loss.get_or_insert(loss);

        // d stylized / d mu = 1 and d stylized / d sigma = content, per
        // channel; reduce the feature gradient over the spatial axes.
        let grad_mu = grad_f.sum_axis(Axis(2)).sum_axis(Axis(1));
        let grad_sigma = (&grad_f * &content).sum_axis(Axis(2)).sum_axis(Axis(1));

        velocity_mu = cfg.momentum * &velocity_mu + &grad_mu;
        velocity_sigma = cfg.momentum * &velocity_sigma + &grad_sigma;
        params.mu = &params.mu - &(cfg.learning_rate * &velocity_mu);
        params.sigma = &params.sigma - &(cfg.learning_rate * &velocity_sigma);

        if !params.mu.iter().chain(params.sigma.iter()).all(|v| v.is_finite()) {
            return Err(Error::MiningDiverged {
                iteration: iter,
                what: "parameters",
            });
        }
    }

    // Loss at the returned parameters (also covers iterations == 0).
    let final_embedded = backend.embed_from_features(&FeatureMap::from_raw(restyle(&content, &params)))?;
    let final_loss = cosine_distance(&final_embedded, target_emb)?;
    Ok(MinedStyle {
        stats: params,
        initial_loss: initial_loss.unwrap_or(final_loss),
        final_loss,
    })
}

fn restyle(content: &ndarray::Array3<f64>, params: &StyleStats) -> ndarray::Array3<f64> {
    let mut out = content.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (params.mu[c], params.sigma[c]);
        plane.mapv_inplace(|x| s * x + m);
    }
    out
}

/// What the mined styles were steered towards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetDescriptor {
    Prompt { value: String },
    #[serde(rename = "concept+suffix")]
    Concept { suffix: String, concept_hash: String },
    Image { content_hash: String },
    /// Control banks that replay each instance's own statistics.
    IdentityControl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub format_version: u32,
    pub channels: usize,
    pub count: usize,
    pub encoder_id: String,
    pub target_descriptor: TargetDescriptor,
    pub mining_config: MiningConfig,
    pub seed: u64,
    pub sigma_nonpositive_total: usize,
    /// How source images were fitted to the backend resolution.
    pub crop_policy: String,
}

/// Ordered, persisted collection of mined styles. Styles are stored at f32
/// precision, the precision of the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBank {
    styles: Vec<StyleStats>,
    pub manifest: BankManifest,
}

impl StyleBank {
    pub fn new(styles: Vec<StyleStats>, manifest: BankManifest) -> Result<Self> {
        if styles.is_empty() {
            return Err(Error::validation("style bank must contain at least one style"));
        }
        if manifest.count != styles.len() {
            return Err(Error::validation(format!(
                "manifest count {} != styles {}",
                manifest.count,
                styles.len()
            )));
        }
        if styles.iter().any(|s| s.len() != manifest.channels) {
            return Err(Error::validation("style length differs from manifest channels"));
        }
        let styles: Vec<StyleStats> = styles.iter().map(StyleStats::quantize_f32).collect();
        Ok(StyleBank { styles, manifest })
    }

    pub fn styles(&self) -> &[StyleStats] {
        &self.styles
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.manifest.channels
    }
}

/// Mine one style per input feature, order-preserving.
pub fn mine_bank(
    features: &[FeatureMap],
    target_emb: &EmbeddingVector,
    cfg: &MiningConfig,
    backend: &dyn EncoderBackend,
    target_descriptor: TargetDescriptor,
    crop_policy: &str,
) -> Result<StyleBank> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::validation("mine_bank needs a non-empty feature stream"));
    }
    let results = par::map_indexed(features, |i, f| {
        mine_style_indexed(f, target_emb, cfg, backend, i as u64)
    });
    let mut styles = Vec::with_capacity(results.len());
    let mut losses_down = 0usize;
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => {
                if m.final_loss < m.initial_loss {
                    losses_down += 1;
                }
                styles.push(m.stats);
            }
            Err(e) => {
                return Err(Error::MiningFailed {
                    index,
                    source: Box::new(e),
                })
            }
        }
    }
    log::debug!(
        "mined {} styles; final loss improved on {}/{}",
        styles.len(),
        losses_down,
        styles.len()
    );
    let quantized: Vec<StyleStats> = styles.iter().map(StyleStats::quantize_f32).collect();
    let sigma_nonpositive_total = quantized.iter().map(|s| s.sigma_nonpositive_count()).sum();
    let manifest = BankManifest {
        format_version: BANK_FORMAT_VERSION,
        channels: features[0].channels(),
        count: quantized.len(),
        encoder_id: backend.id().to_string(),
        target_descriptor,
        mining_config: cfg.clone(),
        seed: cfg.seed,
        sigma_nonpositive_total,
        crop_policy: crop_policy.to_string(),
    };
    StyleBank::new(quantized, manifest)
}

/// Bank whose entry i is exactly the statistics of feature i. Control
/// condition for the end-to-end experiment.
pub fn identity_bank(
    features: &[FeatureMap],
    backend: &dyn EncoderBackend,
    seed: u64,
) -> Result<StyleBank> {
    if features.is_empty() {
        return Err(Error::validation("identity bank needs at least one feature"));
    }
    let eps = StatsEpsilon::default();
    let styles: Vec<StyleStats> = features
        .iter()
        .map(|f| channel_stats(f, eps).quantize_f32())
        .collect();
    let manifest = BankManifest {
        format_version: BANK_FORMAT_VERSION,
        channels: features[0].channels(),
        count: styles.len(),
        encoder_id: backend.id().to_string(),
        target_descriptor: TargetDescriptor::IdentityControl,
        mining_config: MiningConfig {
            iterations: 0,
            ..MiningConfig::toy_default(seed)
        },
        seed,
        sigma_nonpositive_total: 0,
        crop_policy: "native".into(),
    };
    StyleBank::new(styles, manifest)
}

/// Content hash over a bank's styles and manifest, recorded into checkpoints
/// adapted with that bank.
pub fn bank_fingerprint(bank: &StyleBank) -> String {
    let mut bytes = Vec::new();
    for s in bank.styles() {
        for v in s.mu.iter().chain(s.sigma.iter()) {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    bytes.extend_from_slice(serde_json::to_string(&bank.manifest).unwrap().as_bytes());
    crate::adapt::hash_bytes(&bytes)
}

const MANIFEST_FILE: &str = "manifest.json";
const STYLES_FILE: &str = "styles.f32";

/// Write `manifest.json` + `styles.f32` (little-endian f32, layout
/// `[count][2][C]` with the mu block before the sigma block per entry).
pub fn save_bank(bank: &StyleBank, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&bank.manifest).map_err(|e| Error::Json {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    let styles_path = dir.join(STYLES_FILE);
    let mut buf = Vec::with_capacity(bank.len() * bank.channels() * 2 * 4);
    for s in bank.styles() {
        for v in s.mu.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in s.sigma.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut file =
        fs::File::create(&styles_path).map_err(|e| Error::io(styles_path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(styles_path.display().to_string(), e))?;
    Ok(())
}

/// Load a bank persisted by [`save_bank`]; round-trips are bit-exact.
pub fn load_bank(dir: &Path) -> Result<StyleBank> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: BankManifest = serde_json::from_str(&json).map_err(|e| Error::Json {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    if manifest.format_version != BANK_FORMAT_VERSION {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!(
                "format_version {} unsupported (expected {BANK_FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let styles_path = dir.join(STYLES_FILE);
    let mut bytes = Vec::new();
    fs::File::open(&styles_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(styles_path.display().to_string(), e))?;
    let expected = manifest.count * 2 * manifest.channels * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            styles_path.display().to_string(),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut styles = Vec::with_capacity(manifest.count);
    let stride = 2 * manifest.channels * 4;
    for entry in 0..manifest.count {
        let base = entry * stride;
        let read_vec = |offset: usize| {
            Array1::from_iter((0..manifest.channels).map(|c| {
                let at = base + offset + c * 4;
                f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64
            }))
        };
        let mu = read_vec(0);
        let sigma = read_vec(manifest.channels * 4);
        styles.push(StyleStats { mu, sigma });
    }
    StyleBank::new(styles, manifest)
}

/// Five-number summary of one channel across bank entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Values beyond 1.5 IQR from the box edges.
    pub outliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub mu: Vec<ChannelSummary>,
    pub sigma: Vec<ChannelSummary>,
    /// Mean over channels (mu and sigma alike) of the inter-instance std.
    pub diversity_score: f64,
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize_channel(values: &mut Vec<f64>) -> ChannelSummary {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = quantile_sorted(values, 0.25);
    let median = quantile_sorted(values, 0.5);
    let q3 = quantile_sorted(values, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let outliers = values.iter().copied().filter(|v| *v < lo || *v > hi).collect();
    ChannelSummary {
        min: values[0],
        q1,
        median,
        q3,
        max: *values.last().unwrap(),
        outliers,
    }
}

fn channel_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Per-channel quartile/outlier summaries plus a scalar diversity score.
pub fn bank_diversity_report(bank: &StyleBank) -> Result<DiversityReport> {
    if bank.len() < 2 {
        return Err(Error::validation("diversity report needs at least 2 styles"));
    }
    let c = bank.channels();
    let collect = |pick: &dyn Fn(&StyleStats) -> &Array1<f64>, ch: usize| -> Vec<f64> {
        bank.styles().iter().map(|s| pick(s)[ch]).collect()
    };
    let mut mu_summaries = Vec::with_capacity(c);
    let mut sigma_summaries = Vec::with_capacity(c);
    let mut stds = Vec::with_capacity(2 * c);
    for ch in 0..c {
        let mut mu_vals = collect(&|s| &s.mu, ch);
        let mut sigma_vals = collect(&|s| &s.sigma, ch);
        stds.push(channel_std(&mu_vals));
        stds.push(channel_std(&sigma_vals));
        mu_summaries.push(summarize_channel(&mut mu_vals));
        sigma_summaries.push(summarize_channel(&mut sigma_vals));
    }
    Ok(DiversityReport {
        mu: mu_summaries,
        sigma: sigma_summaries,
        diversity_score: stds.iter().sum::<f64>() / stds.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::{ToyBackend, TOY_IMAGE_SIZE};
    use crate::types::Image;
    use ndarray::{arr1, Array3};
    use rand::Rng;

    fn toy_features(n: usize, base_seed: u64, backend: &ToyBackend) -> Vec<FeatureMap> {
        (0..n)
            .map(|i| {
                let mut rng = rng_for(base_seed, Stream::ToyData, i as u64);
                let img = Image::new(Array3::from_shape_fn(
                    (3, TOY_IMAGE_SIZE, TOY_IMAGE_SIZE),
                    |_| rng.random_range(0.0..1.0),
                ))
                .unwrap();
                backend.extract_low_features(&img).unwrap()
            })
            .collect()
    }

    fn manifest_for(bank_channels: usize, count: usize, backend: &ToyBackend) -> BankManifest {
        BankManifest {
            format_version: BANK_FORMAT_VERSION,
            channels: bank_channels,
            count,
            encoder_id: backend.id().to_string(),
            target_descriptor: TargetDescriptor::Prompt {
                value: "toy night".into(),
            },
            mining_config: MiningConfig::toy_default(3),
            seed: 3,
            sigma_nonpositive_total: 0,
            crop_policy: "native".into(),
        }
    }

    #[test]
    fn zero_iterations_returns_source_stats() {
        let backend = ToyBackend::new();
        let f = &toy_features(1, 0, &backend)[0];
        let target = backend.encode_text_raw("toy night").unwrap();
        let cfg = MiningConfig {
            iterations: 0,
            ..MiningConfig::toy_default(1)
        };
        let mined = mine_style(f, &target, &cfg, &backend).unwrap();
        let src = channel_stats(f, StatsEpsilon::default());
        assert_eq!(mined.stats, src);
        assert_eq!(mined.initial_loss, mined.final_loss);
    }

    #[test]
    fn stationary_point_keeps_source_stats() {
        let backend = ToyBackend::new();
        let f = &toy_features(1, 1, &backend)[0];
        let target = backend.embed_from_features(f).unwrap();
        let cfg = MiningConfig::toy_default(1);
        let mined = mine_style(f, &target, &cfg, &backend).unwrap();
        assert!(mined.initial_loss.abs() < 1e-12);
        let src = channel_stats(f, StatsEpsilon::default());
        for (a, b) in mined.stats.mu.iter().zip(src.mu.iter()) {
            assert!((a - b).abs() <= 1e-6, "mu moved: {a} vs {b}");
        }
        for (a, b) in mined.stats.sigma.iter().zip(src.sigma.iter()) {
            assert!((a - b).abs() <= 1e-6, "sigma moved: {a} vs {b}");
        }
    }

    #[test]
    fn descent_on_toy_instances() {
        let backend = ToyBackend::new();
        let features = toy_features(8, 2, &backend);
        let target = backend.encode_text_raw("toy night").unwrap();
        let cfg = MiningConfig {
            iterations: 40,
            ..MiningConfig::toy_default(2)
        };
        let mut improved = 0;
        for f in &features {
            let m = mine_style(f, &target, &cfg, &backend).unwrap();
            if m.final_loss < m.initial_loss {
                improved += 1;
            }
        }
        assert!(improved >= 7, "only {improved}/8 instances improved");
    }

    #[test]
    fn bank_cardinality_and_determinism() {
        let backend = ToyBackend::new();
        let features = toy_features(10, 3, &backend);
        let target = backend.encode_text_raw("toy night").unwrap();
        let cfg = MiningConfig {
            iterations: 10,
            ..MiningConfig::toy_default(3)
        };
        let desc = TargetDescriptor::Prompt {
            value: "toy night".into(),
        };
        let a = mine_bank(&features, &target, &cfg, &backend, desc.clone(), "native").unwrap();
        let b = mine_bank(&features, &target, &cfg, &backend, desc, "native").unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
    }

    #[test]
    fn per_instance_independence() {
        let backend = ToyBackend::new();
        let features = toy_features(4, 4, &backend);
        let target = backend.encode_text_raw("toy day").unwrap();
        let cfg = MiningConfig {
            iterations: 15,
            batch_size: 1,
            ..MiningConfig::toy_default(4)
        };
        let solo = mine_style_indexed(&features[2], &target, &cfg, &backend, 2).unwrap();
        let cfg16 = MiningConfig {
            batch_size: 16,
            ..cfg
        };
        let desc = TargetDescriptor::Prompt { value: "toy day".into() };
        let bank = mine_bank(&features, &target, &cfg16, &backend, desc, "native").unwrap();
        for (a, b) in bank.styles()[2].mu.iter().zip(solo.stats.mu.iter()) {
            assert!((a - b).abs() <= 1e-5);
        }
        for (a, b) in bank.styles()[2].sigma.iter().zip(solo.stats.sigma.iter()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let backend = ToyBackend::new();
        let features = toy_features(3, 5, &backend);
        let target = backend.encode_text_raw("toy snow").unwrap();
        let cfg = MiningConfig {
            iterations: 5,
            ..MiningConfig::toy_default(5)
        };
        let bank = mine_bank(
            &features,
            &target,
            &cfg,
            &backend,
            TargetDescriptor::Prompt { value: "toy snow".into() },
            "native",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bank(&bank, dir.path()).unwrap();
        let loaded = load_bank(dir.path()).unwrap();
        assert_eq!(bank, loaded);
    }

    #[test]
    fn truncated_styles_file_names_byte_counts() {
        let backend = ToyBackend::new();
        let styles = vec![
            StyleStats::new(arr1(&[1.0; 8]), arr1(&[2.0; 8])).unwrap(),
            StyleStats::new(arr1(&[3.0; 8]), arr1(&[4.0; 8])).unwrap(),
        ];
        let bank = StyleBank::new(styles, manifest_for(8, 2, &backend)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bank(&bank, dir.path()).unwrap();
        let styles_path = dir.path().join(STYLES_FILE);
        let bytes = fs::read(&styles_path).unwrap();
        fs::write(&styles_path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_bank(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("128 bytes") && msg.contains("124"), "got: {msg}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let backend = ToyBackend::new();
        let styles = vec![StyleStats::new(arr1(&[1.0; 8]), arr1(&[2.0; 8])).unwrap()];
        let bank = StyleBank::new(styles, manifest_for(8, 1, &backend)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bank(&bank, dir.path()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let json = fs::read_to_string(&manifest_path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&manifest_path, json).unwrap();
        assert!(matches!(load_bank(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn diversity_zero_for_identical_styles() {
        let backend = ToyBackend::new();
        let s = StyleStats::new(arr1(&[1.0; 8]), arr1(&[2.0; 8])).unwrap();
        let bank = StyleBank::new(vec![s.clone(), s.clone(), s], manifest_for(8, 3, &backend)).unwrap();
        let report = bank_diversity_report(&bank).unwrap();
        assert_eq!(report.diversity_score, 0.0);
    }

    #[test]
    fn diversity_needs_two_entries() {
        let backend = ToyBackend::new();
        let s = StyleStats::new(arr1(&[1.0; 8]), arr1(&[2.0; 8])).unwrap();
        let bank = StyleBank::new(vec![s], manifest_for(8, 1, &backend)).unwrap();
        assert!(bank_diversity_report(&bank).is_err());
    }

    #[test]
    fn quartiles_match_sort_oracle_on_four_entries() {
        let backend = ToyBackend::new();
        // channel 0 mu values across the 4 entries: 1, 7, 3, 5
        let mk = |mu0: f64, sig0: f64| {
            StyleStats::new(arr1(&[mu0, 0.0]), arr1(&[sig0, 1.0])).unwrap()
        };
        let bank = StyleBank::new(
            vec![mk(1.0, 2.0), mk(7.0, 8.0), mk(3.0, 4.0), mk(5.0, 6.0)],
            manifest_for(2, 4, &backend),
        )
        .unwrap();
        let report = bank_diversity_report(&bank).unwrap();
        // sorted: [1,3,5,7]; linear-interpolation quartiles
        let s = &report.mu[0];
        assert_eq!(s.min, 1.0);
        assert_eq!(s.q1, 2.5);
        assert_eq!(s.median, 4.0);
        assert_eq!(s.q3, 5.5);
        assert_eq!(s.max, 7.0);
        assert!(s.outliers.is_empty());
        let t = &report.sigma[0];
        assert_eq!((t.q1, t.median, t.q3), (3.5, 5.0, 6.5));
    }

    #[test]
    fn divergence_reports_iteration() {
        use crate::backend::EncoderBackend;
        use crate::types::{EmbeddingVector, Image};
        use std::sync::atomic::{AtomicUsize, Ordering};

        // The cosine loss itself is bounded, so the guard is exercised with
        // a backend whose gradients go NaN after a fixed number of steps.
        struct Saboteur {
            inner: ToyBackend,
            calls: AtomicUsize,
            nan_from_call: usize,
        }
        impl EncoderBackend for Saboteur {
            fn id(&self) -> &str {
                "saboteur"
            }
            fn feature_channels(&self) -> usize {
                self.inner.feature_channels()
            }
            fn embedding_dim(&self) -> usize {
                self.inner.embedding_dim()
            }
            fn native_image_size(&self) -> (usize, usize) {
                self.inner.native_image_size()
            }
            fn extract_low_features(&self, image: &Image) -> crate::Result<FeatureMap> {
                self.inner.extract_low_features(image)
            }
            fn forward_high_features(&self, low: &FeatureMap) -> crate::Result<FeatureMap> {
                self.inner.forward_high_features(low)
            }
            fn embed_from_features(&self, f: &FeatureMap) -> crate::Result<EmbeddingVector> {
                self.inner.embed_from_features(f)
            }
            fn embed_from_features_vjp(
                &self,
                f: &FeatureMap,
                upstream: &dyn Fn(&EmbeddingVector) -> ndarray::Array1<f64>,
            ) -> crate::Result<(EmbeddingVector, ndarray::Array3<f64>)> {
                let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
                let (e, mut grad) = self.inner.embed_from_features_vjp(f, upstream)?;
                if call >= self.nan_from_call {
                    grad.fill(f64::NAN);
                }
                Ok((e, grad))
            }
            fn encode_text_raw(&self, text: &str) -> crate::Result<EmbeddingVector> {
                self.inner.encode_text_raw(text)
            }
            fn weights_fingerprint(&self) -> u64 {
                self.inner.weights_fingerprint()
            }
        }

        let toy = ToyBackend::new();
        let f = &toy_features(1, 6, &toy)[0];
        let target = toy.encode_text_raw("toy day").unwrap();
        let backend = Saboteur {
            inner: toy,
            calls: AtomicUsize::new(0),
            nan_from_call: 3,
        };
        let cfg = MiningConfig {
            iterations: 10,
            ..MiningConfig::toy_default(6)
        };
        match mine_style(f, &target, &cfg, &backend) {
            Err(Error::MiningDiverged { iteration, what }) => {
                assert_eq!(iteration, 3);
                assert_eq!(what, "parameters");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
