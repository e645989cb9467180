//! Core domain types: feature maps, channel statistics, joint-space embeddings.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `C x H x W` activation block from the encoder's low-level stage.
///
/// Values are finite by construction. Batched work is expressed as slices of
/// `FeatureMap`s; statistics are always per-instance, per-channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::validation(format!(
                "feature map dimensions must be >= 1, got {c}x{h}x{w}"
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("feature map contains non-finite values"));
        }
        Ok(Self { values })
    }

    /// Construct without the finiteness scan. For internal hot paths whose
    /// inputs were already validated; divergence is caught by the mining loop.
    pub(crate) fn from_raw(values: Array3<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Per-channel mean and standard deviation of a feature map: the carrier of
/// visual style. Mined sigmas may go non-positive (the optimizer is
/// unconstrained); `sigma_nonpositive_count` surfaces that.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStats {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

impl StyleStats {
    pub fn new(mu: Array1<f64>, sigma: Array1<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::ShapeMismatch {
                context: "StyleStats",
                expected: format!("sigma of length {}", mu.len()),
                actual: format!("length {}", sigma.len()),
            });
        }
        if mu.is_empty() {
            return Err(Error::validation("style stats must have >= 1 channel"));
        }
        if !mu.iter().chain(sigma.iter()).all(|v| v.is_finite()) {
            return Err(Error::validation("style stats contain non-finite values"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Number of channels whose sigma is <= 0. Zero for freshly computed
    /// image statistics; may be positive for mined statistics.
    pub fn sigma_nonpositive_count(&self) -> usize {
        self.sigma.iter().filter(|s| **s <= 0.0).count()
    }

    /// Quantize through f32, the precision of every persisted style artifact.
    pub fn quantize_f32(&self) -> StyleStats {
        StyleStats {
            mu: self.mu.mapv(|v| v as f32 as f64),
            sigma: self.sigma.mapv(|v| v as f32 as f64),
        }
    }
}

/// A vector in the joint vision-language space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Array1<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("embedding contains non-finite values"));
        }
        let norm = values.dot(&values).sqrt();
        if norm <= 0.0 {
            return Err(Error::validation(
                "embedding has zero norm; cosine distance is undefined",
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }

    /// Rescale to unit Euclidean norm.
    pub fn normalized(&self) -> EmbeddingVector {
        EmbeddingVector {
            values: &self.values / self.norm(),
        }
    }
}

/// Numerical-stability constant used inside the variance square root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StatsEpsilon(f64);

impl StatsEpsilon {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::validation(format!("eps must be positive, got {eps}")));
        }
        Ok(Self(eps))
    }

    pub fn get(&self) -> f64 {
        self.0
    }
}

impl Default for StatsEpsilon {
    fn default() -> Self {
        StatsEpsilon(1e-5)
    }
}

/// An RGB image as a `3 x H x W` array of values in `[0, 1]`.
///
/// Backends apply their own pixel normalization on top of this contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    values: Array3<f64>,
}

impl Image {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::validation(format!(
                "image must be 3xHxW with H, W >= 1, got {c}x{h}x{w}"
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("image contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn feature_map_rejects_nan() {
        let mut a = Array3::<f64>::zeros((1, 2, 2));
        a[[0, 0, 0]] = f64::NAN;
        assert!(FeatureMap::new(a).is_err());
    }

    #[test]
    fn feature_map_rejects_empty_axes() {
        assert!(FeatureMap::new(Array3::<f64>::zeros((0, 2, 2))).is_err());
    }

    #[test]
    fn embedding_rejects_zero_norm() {
        assert!(EmbeddingVector::new(arr1(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn style_stats_counts_nonpositive_sigma() {
        let s = StyleStats::new(arr1(&[0.0, 1.0, 2.0]), arr1(&[1.0, 0.0, -0.5])).unwrap();
        assert_eq!(s.sigma_nonpositive_count(), 2);
    }

    #[test]
    fn eps_must_be_positive() {
        assert!(StatsEpsilon::new(0.0).is_err());
        assert!(StatsEpsilon::new(-1.0).is_err());
        assert!(StatsEpsilon::new(1e-5).is_ok());
        assert_eq!(StatsEpsilon::default().get(), 1e-5);
    }
}
