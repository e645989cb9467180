//! Channel-statistics primitives: instance normalization, AdaIN, PIN,
//! cosine distance, statistics mixing and Gaussian perturbation.
//!
//! All functions are pure; statistics are per-instance and per-channel with
//! population (biased) variance and the stability constant inside the square
//! root.

use ndarray::{Array1, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::types::{EmbeddingVector, FeatureMap, StatsEpsilon, StyleStats};

/// Per-channel spatial mean and standard deviation of a feature map.
pub fn channel_stats(f: &FeatureMap, eps: StatsEpsilon) -> StyleStats {
    let v = f.values();
    let n = (f.height() * f.width()) as f64;
    let mu = v.sum_axis(Axis(2)).sum_axis(Axis(1)) / n;
    let mut sigma = Array1::<f64>::zeros(f.channels());
    for (c, mut_row) in sigma.iter_mut().enumerate() {
        let m = mu[c];
        let ss: f64 = v.index_axis(Axis(0), c).iter().map(|x| (x - m) * (x - m)).sum();
        *mut_row = (ss / n + eps.get()).sqrt();
    }
    StyleStats { mu, sigma }
}

/// `(f - mu(f)) / sigma(f)` per channel, without any affine transform.
/// Building block for AdaIN/PIN; also the content signature used by the
/// IN-invariance property.
pub fn normalized_values(f: &FeatureMap, eps: StatsEpsilon) -> Array3<f64> {
    let stats = channel_stats(f, eps);
    let mut out = f.values().clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let m = stats.mu[c];
        let s = stats.sigma[c];
        plane.mapv_inplace(|x| (x - m) / s);
    }
    out
}

/// Instance normalization with identity affine.
pub fn instance_normalize(f: &FeatureMap, eps: StatsEpsilon) -> FeatureMap {
    FeatureMap::from_raw(normalized_values(f, eps))
}

fn apply_affine(normalized: &Array3<f64>, stats: &StyleStats) -> Array3<f64> {
    let mut out = normalized.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let m = stats.mu[c];
        let s = stats.sigma[c];
        plane.mapv_inplace(|x| s * x + m);
    }
    out
}

fn check_channels(f: &FeatureMap, stats: &StyleStats) -> Result<()> {
    if f.channels() != stats.len() {
        return Err(Error::ChannelMismatch {
            feature: f.channels(),
            stats: stats.len(),
        });
    }
    Ok(())
}

/// Re-statistics `f` to the target per-channel mean and std.
pub fn adain(f: &FeatureMap, target: &StyleStats, eps: StatsEpsilon) -> Result<FeatureMap> {
    check_channels(f, target)?;
    let n = normalized_values(f, eps);
    Ok(FeatureMap::from_raw(apply_affine(&n, target)))
}

/// Same affine form as [`adain`], with `params` as externally optimizable
/// variables. The mining loop differentiates through this by noting that the
/// output is linear in `params` once the normalized input is fixed.
pub fn pin_apply(f: &FeatureMap, params: &StyleStats, eps: StatsEpsilon) -> Result<FeatureMap> {
    adain(f, params, eps)
}

/// `1 - a.b / (|a||b|)`; range [0, 2].
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "cosine_distance",
            expected: format!("length {}", a.len()),
            actual: format!("length {}", b.len()),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na <= 0.0 || nb <= 0.0 {
        return Err(Error::validation("cosine distance needs nonzero norms"));
    }
    Ok(1.0 - a.values().dot(b.values()) / (na * nb))
}

/// Cosine distance plus its gradient with respect to the first argument.
pub fn cosine_distance_with_grad(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
) -> Result<(f64, Array1<f64>)> {
    let dist = cosine_distance(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    let dot = a.values().dot(b.values());
    // d/da [1 - a.b/(|a||b|)] = (a.b) a / (|a|^3 |b|) - b / (|a||b|)
    let grad = a.values() * (dot / (na.powi(3) * nb)) - b.values() / (na * nb);
    Ok((dist, grad))
}

/// Per-channel convex combination of source and target statistics.
/// `alpha` weights the target side.
pub fn mix_stats(src: &StyleStats, trg: &StyleStats, alpha: &Array1<f64>) -> Result<StyleStats> {
    if src.len() != trg.len() || src.len() != alpha.len() {
        return Err(Error::ShapeMismatch {
            context: "mix_stats",
            expected: format!("matching lengths {}", src.len()),
            actual: format!("trg {}, alpha {}", trg.len(), alpha.len()),
        });
    }
    if !alpha.iter().all(|a| (0.0..=1.0).contains(a)) {
        return Err(Error::validation("mixing weights must lie in [0, 1]"));
    }
    let mu = alpha * &trg.mu + &(1.0 - alpha) * &src.mu;
    let sigma = alpha * &trg.sigma + &(1.0 - alpha) * &src.sigma;
    Ok(StyleStats { mu, sigma })
}

/// Signal-to-noise ratio in decibels, with an explicit no-noise sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnrDb {
    /// Leave the statistics untouched.
    #[serde(rename = "no-noise", with = "no_noise_serde")]
    NoNoise,
    Db(f64),
}

mod no_noise_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str("no-noise")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "no-noise" {
            Ok(())
        } else {
            Err(de::Error::custom("expected \"no-noise\""))
        }
    }
}

/// Add zero-mean Gaussian noise to `mu` and `sigma` so that the expected
/// power ratio over the concatenated (mu, sigma) vector equals
/// `10^(snr_db/10)`. Deterministic given the seed.
pub fn gaussian_perturb_stats(s: &StyleStats, snr_db: SnrDb, rng_seed: u64) -> Result<StyleStats> {
    let snr = match snr_db {
        SnrDb::NoNoise => return Ok(s.clone()),
        SnrDb::Db(v) => {
            if !v.is_finite() {
                return Err(Error::validation("snr_db must be finite (or the no-noise sentinel)"));
            }
            v
        }
    };
    let c = s.len() as f64;
    let signal_power = (s.mu.dot(&s.mu) + s.sigma.dot(&s.sigma)) / (2.0 * c);
    let noise_var = signal_power / 10f64.powf(snr / 10.0);
    let noise_std = noise_var.sqrt();
    let mut rng = rng_for(rng_seed, Stream::StatsPerturb, 0);
    if noise_std == 0.0 {
        return Ok(s.clone());
    }
    let normal = Normal::new(0.0, noise_std).expect("finite std");
    let mu = s.mu.mapv(|v| v + normal.sample(&mut rng));
    let sigma = s.sigma.mapv(|v| v + normal.sample(&mut rng));
    Ok(StyleStats { mu, sigma })
}

/// Uniform per-channel mixing weights in [0, 1].
pub fn sample_mixing_weights<R: Rng>(channels: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_iter((0..channels).map(|_| rng.random_range(0.0..=1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array3};

    fn eps() -> StatsEpsilon {
        StatsEpsilon::default()
    }

    fn fm(values: Array3<f64>) -> FeatureMap {
        FeatureMap::new(values).unwrap()
    }

    #[test]
    fn constant_channel_stats() {
        let f = fm(Array3::from_elem((1, 4, 4), 3.0));
        let s = channel_stats(&f, eps());
        assert_abs_diff_eq!(s.mu[0], 3.0);
        assert_abs_diff_eq!(s.sigma[0], 1e-5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn four_value_channel_matches_direct_arithmetic() {
        // direct oracle over {1,3,5,7}: mean 4, population variance 5
        let f = fm(Array3::from_shape_vec((1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let s = channel_stats(&f, eps());
        assert_abs_diff_eq!(s.mu[0], 4.0);
        assert_abs_diff_eq!(s.sigma[0], (5.0 + 1e-5f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn stats_invariant_under_spatial_permutation() {
        let f = fm(Array3::from_shape_vec((1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let g = fm(Array3::from_shape_vec((1, 2, 2), vec![7.0, 1.0, 3.0, 5.0]).unwrap());
        let (a, b) = (channel_stats(&f, eps()), channel_stats(&g, eps()));
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.sigma, b.sigma);
    }

    #[test]
    fn adain_identity_when_target_is_own_stats() {
        let f = fm(Array3::from_shape_vec((2, 2, 2), (0..8).map(|i| i as f64).collect()).unwrap());
        let t = channel_stats(&f, eps());
        let out = adain(&f, &t, eps()).unwrap();
        for (a, b) in out.values().iter().zip(f.values().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn adain_affine_form_on_standardized_input() {
        // per-channel stats (0,1) up to eps and target (5, 2) => 2 f + 5
        let vals = vec![-1.0, 1.0, -1.0, 1.0];
        let f = fm(Array3::from_shape_vec((1, 2, 2), vals.clone()).unwrap());
        let t = StyleStats::new(arr1(&[5.0]), arr1(&[2.0])).unwrap();
        let out = adain(&f, &t, eps()).unwrap();
        for (o, x) in out.values().iter().zip(vals.iter()) {
            assert_abs_diff_eq!(*o, 2.0 * x + 5.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn adain_output_stats_match_target() {
        let f = fm(Array3::from_shape_vec((2, 3, 3), (0..18).map(|i| (i as f64).sin()).collect())
            .unwrap());
        let t = StyleStats::new(arr1(&[2.0, -1.0]), arr1(&[1.5, 0.25])).unwrap();
        let out = adain(&f, &t, eps()).unwrap();
        let s = channel_stats(&out, eps());
        for c in 0..2 {
            assert_abs_diff_eq!(s.mu[c], t.mu[c], epsilon = 1e-4 * t.mu[c].abs().max(1.0));
            assert_abs_diff_eq!(s.sigma[c], t.sigma[c], epsilon = 1e-4 * t.sigma[c]);
        }
    }

    #[test]
    fn adain_rejects_channel_mismatch() {
        let f = fm(Array3::zeros((2, 2, 2)));
        let t = StyleStats::new(arr1(&[0.0]), arr1(&[1.0])).unwrap();
        assert!(matches!(
            adain(&f, &t, eps()),
            Err(Error::ChannelMismatch { feature: 2, stats: 1 })
        ));
    }

    #[test]
    fn pin_with_zero_one_params_is_instance_normalization() {
        let f = fm(Array3::from_shape_vec((1, 2, 2), vec![2.0, 4.0, 6.0, 8.0]).unwrap());
        let p = StyleStats::new(arr1(&[0.0]), arr1(&[1.0])).unwrap();
        let out = pin_apply(&f, &p, eps()).unwrap();
        let direct = instance_normalize(&f, eps());
        assert_eq!(out.values(), direct.values());
    }

    #[test]
    fn cosine_distance_basics() {
        let v = EmbeddingVector::new(arr1(&[0.3, -0.4, 1.2])).unwrap();
        let neg = EmbeddingVector::new(arr1(&[-0.3, 0.4, -1.2])).unwrap();
        assert_abs_diff_eq!(cosine_distance(&v, &v).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_distance(&v, &neg).unwrap(), 2.0, epsilon = 1e-12);
        let e1 = EmbeddingVector::new(arr1(&[1.0, 0.0])).unwrap();
        let e2 = EmbeddingVector::new(arr1(&[0.0, 1.0])).unwrap();
        assert_abs_diff_eq!(cosine_distance(&e1, &e2).unwrap(), 1.0);
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let a = EmbeddingVector::new(arr1(&[0.5, -1.0, 2.0, 0.1])).unwrap();
        let b = EmbeddingVector::new(arr1(&[1.0, 0.3, -0.2, 0.8])).unwrap();
        let (_, grad) = cosine_distance_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut plus = a.values().clone();
            plus[i] += h;
            let mut minus = a.values().clone();
            minus[i] -= h;
            let lp = cosine_distance(&EmbeddingVector::new(plus).unwrap(), &b).unwrap();
            let lm = cosine_distance(&EmbeddingVector::new(minus).unwrap(), &b).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert_abs_diff_eq!(grad[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn mix_stats_endpoints_and_midpoint() {
        let src = StyleStats::new(arr1(&[0.0, 0.0]), arr1(&[1.0, 2.0])).unwrap();
        let trg = StyleStats::new(arr1(&[2.0, 4.0]), arr1(&[3.0, 6.0])).unwrap();
        let zero = mix_stats(&src, &trg, &arr1(&[0.0, 0.0])).unwrap();
        assert_eq!(zero, src);
        let one = mix_stats(&src, &trg, &arr1(&[1.0, 1.0])).unwrap();
        assert_eq!(one, trg);
        let mid = mix_stats(&src, &trg, &arr1(&[0.5, 0.25])).unwrap();
        assert_eq!(mid.mu, arr1(&[1.0, 1.0]));
    }

    #[test]
    fn mix_stats_rejects_out_of_range_alpha() {
        let s = StyleStats::new(arr1(&[0.0]), arr1(&[1.0])).unwrap();
        assert!(mix_stats(&s, &s, &arr1(&[1.5])).is_err());
        assert!(mix_stats(&s, &s, &arr1(&[-0.1])).is_err());
    }

    #[test]
    fn perturb_no_noise_sentinel_is_identity() {
        let s = StyleStats::new(arr1(&[1.0, -2.0]), arr1(&[0.5, 3.0])).unwrap();
        let out = gaussian_perturb_stats(&s, SnrDb::NoNoise, 99).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn perturb_is_deterministic_per_seed() {
        let s = StyleStats::new(arr1(&[1.0, -2.0, 0.3]), arr1(&[0.5, 3.0, 1.1])).unwrap();
        let a = gaussian_perturb_stats(&s, SnrDb::Db(20.0), 7).unwrap();
        let b = gaussian_perturb_stats(&s, SnrDb::Db(20.0), 7).unwrap();
        let c = gaussian_perturb_stats(&s, SnrDb::Db(20.0), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn snr_serde_roundtrip() {
        assert_eq!(serde_json::to_string(&SnrDb::Db(20.0)).unwrap(), "20.0");
        assert_eq!(serde_json::to_string(&SnrDb::NoNoise).unwrap(), "\"no-noise\"");
        let d: SnrDb = serde_json::from_str("\"no-noise\"").unwrap();
        assert_eq!(d, SnrDb::NoNoise);
        let d: SnrDb = serde_json::from_str("20.0").unwrap();
        assert_eq!(d, SnrDb::Db(20.0));
    }
}
