//! Segmentation metrics: confusion accumulation and mean IoU at native
//! image resolution.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adapt::Segmenter;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::par;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Confusion counts indexed `[ground_truth][prediction]`; pixels whose label
/// equals the ignore index are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    num_classes: usize,
    ignore_index: u8,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_index: u8) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::validation("need at least one class"));
        }
        if (ignore_index as usize) < num_classes {
            return Err(Error::validation("ignore_index must lie outside [0, K)"));
        }
        Ok(ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
            num_classes,
            ignore_index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Total counted pixels.
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn accumulate(&mut self, pred: &Array2<u8>, label: &Array2<u8>) -> Result<()> {
        if pred.dim() != label.dim() {
            return Err(Error::ShapeMismatch {
                context: "confusion accumulate",
                expected: format!("{:?}", label.dim()),
                actual: format!("{:?}", pred.dim()),
            });
        }
        for (p, g) in pred.iter().zip(label.iter()) {
            if *g == self.ignore_index {
                continue;
            }
            if (*g as usize) >= self.num_classes {
                return Err(Error::validation(format!(
                    "label value {g} outside [0, {})",
                    self.num_classes
                )));
            }
            if (*p as usize) >= self.num_classes {
                return Err(Error::validation(format!(
                    "prediction value {p} outside [0, {})",
                    self.num_classes
                )));
            }
            self.counts[[*g as usize, *p as usize]] += 1;
        }
        Ok(())
    }

    /// Exact merge; accumulation is associative over image partitions.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.num_classes, other.num_classes);
        self.counts += &other.counts;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// Mean over classes with non-empty union, in [0, 1].
    pub miou: f64,
    /// Per-class IoU; `None` for classes absent from both pred and label.
    pub per_class: Vec<Option<f64>>,
}

/// `IoU_k = TP / (TP + FP + FN)`; classes with empty union are excluded
/// from the mean.
pub fn miou(cm: &ConfusionMatrix) -> Result<MiouResult> {
    let k = cm.num_classes;
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..k {
        let tp = cm.counts[[c, c]];
        let fp: u64 = (0..k).filter(|g| *g != c).map(|g| cm.counts[[g, c]]).sum();
        let fn_: u64 = (0..k).filter(|p| *p != c).map(|p| cm.counts[[c, p]]).sum();
        let union = tp + fp + fn_;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::validation("all classes empty; mIoU undefined"));
    }
    Ok(MiouResult {
        miou: sum / n as f64,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub total: u64,
    pub counted: u64,
    pub ignored: u64,
}

/// Versioned evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub num_classes: usize,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels: PixelCounts,
    pub num_images: usize,
    pub seed: u64,
    pub config_echo: serde_json::Value,
}

/// Stream the dataset at native resolution and report mIoU.
pub fn evaluate_model(
    model: &Segmenter,
    samples: &[SegSample],
    seed: u64,
    config_echo: serde_json::Value,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::validation("evaluation needs at least one sample"));
    }
    let k = model.num_classes();
    let ignore = samples[0].ignore_index;
    for s in samples {
        if s.num_classes != k {
            return Err(Error::validation(format!(
                "model has {k} classes but dataset sample declares {}",
                s.num_classes
            )));
        }
    }
    let per_image: Vec<Result<(ConfusionMatrix, u64, u64)>> = par::map_indexed(samples, |_, s| {
        let pred = model.predict(&s.image)?;
        let mut cm = ConfusionMatrix::new(k, ignore)?;
        cm.accumulate(&pred, &s.label)?;
        let total = s.label.len() as u64;
        let counted = cm.total();
        Ok((cm, total, counted))
    });
    let mut merged = ConfusionMatrix::new(k, ignore)?;
    let (mut total, mut counted) = (0u64, 0u64);
    for r in per_image {
        let (cm, t, c) = r?;
        merged.merge(&cm);
        total += t;
        counted += c;
    }
    let m = miou(&merged)?;
    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        num_classes: k,
        miou: m.miou,
        per_class_iou: m.per_class,
        pixels: PixelCounts {
            total,
            counted,
            ignored: total - counted,
        },
        num_images: samples.len(),
        seed,
        config_echo,
    })
}

/// Mean and standard deviation of mIoU over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub mean_miou: f64,
    pub std_miou: f64,
    pub mious: Vec<f64>,
}

pub fn aggregate_reports(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::validation("nothing to aggregate"));
    }
    let mious: Vec<f64> = reports.iter().map(|r| r.miou).collect();
    let n = mious.len() as f64;
    let mean = mious.iter().sum::<f64>() / n;
    let var = mious.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
    Ok(AggregateReport {
        runs: reports.len(),
        mean_miou: mean,
        std_miou: var.sqrt(),
        mious,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn cm2(pred: &Array2<u8>, label: &Array2<u8>) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(2, 255).unwrap();
        cm.accumulate(pred, label).unwrap();
        cm
    }

    #[test]
    fn all_ignore_leaves_cm_unchanged() {
        let pred = arr2(&[[0u8, 1], [1, 0]]);
        let label = arr2(&[[255u8, 255], [255, 255]]);
        let cm = cm2(&pred, &label);
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn perfect_prediction_hits_diagonal_only() {
        let label = arr2(&[[0u8, 1], [1, 0]]);
        let cm = cm2(&label.clone(), &label);
        assert_eq!(cm.counts()[[0, 0]], 2);
        assert_eq!(cm.counts()[[1, 1]], 2);
        assert_eq!(cm.counts()[[0, 1]] + cm.counts()[[1, 0]], 0);
        assert_eq!(miou(&cm).unwrap().miou, 1.0);
    }

    #[test]
    fn hand_enumerated_two_by_two_case() {
        // pred=[0,1;1,1], label=[0,1;0,1]
        let pred = arr2(&[[0u8, 1], [1, 1]]);
        let label = arr2(&[[0u8, 1], [0, 1]]);
        let cm = cm2(&pred, &label);
        assert_eq!(cm.counts()[[0, 0]], 1);
        assert_eq!(cm.counts()[[0, 1]], 1);
        assert_eq!(cm.counts()[[1, 1]], 2);
        let m = miou(&cm).unwrap();
        assert_eq!(m.per_class[0], Some(0.5));
        assert_eq!(m.per_class[1], Some(2.0 / 3.0));
        // the mean of the hand values, computed the same way
        assert_eq!(m.miou, (0.5 + 2.0 / 3.0) / 2.0);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn fully_disjoint_prediction_scores_zero() {
        let pred = arr2(&[[1u8, 1], [1, 1]]);
        let label = arr2(&[[0u8, 0], [0, 0]]);
        let m = miou(&cm2(&pred, &label)).unwrap();
        assert_eq!(m.miou, 0.0);
    }

    #[test]
    fn empty_union_classes_excluded_from_mean() {
        let mut cm = ConfusionMatrix::new(3, 255).unwrap();
        let pred = arr2(&[[0u8, 1]]);
        let label = arr2(&[[0u8, 1]]);
        cm.accumulate(&pred, &label).unwrap();
        let m = miou(&cm).unwrap();
        assert_eq!(m.per_class[2], None);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn out_of_range_values_rejected() {
        let mut cm = ConfusionMatrix::new(2, 255).unwrap();
        let bad_label = arr2(&[[7u8]]);
        let ok = arr2(&[[0u8]]);
        assert!(cm.accumulate(&ok, &bad_label).is_err());
        assert!(cm.accumulate(&bad_label, &ok).is_err());
        let mismatched = arr2(&[[0u8, 0]]);
        assert!(cm.accumulate(&mismatched, &ok).is_err());
    }

    #[test]
    fn miou_invariant_under_class_permutation() {
        let pred = arr2(&[[0u8, 1, 2], [2, 1, 0]]);
        let label = arr2(&[[0u8, 2, 2], [1, 1, 0]]);
        let mut cm = ConfusionMatrix::new(3, 255).unwrap();
        cm.accumulate(&pred, &label).unwrap();
        let base = miou(&cm).unwrap().miou;
        // permutation (0 1 2) -> (2 0 1) applied to both
        let perm = |a: &Array2<u8>| a.mapv(|v| [2u8, 0, 1][v as usize]);
        let mut cmp = ConfusionMatrix::new(3, 255).unwrap();
        cmp.accumulate(&perm(&pred), &perm(&label)).unwrap();
        assert!((miou(&cmp).unwrap().miou - base).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn accumulate_is_associative_over_partitions(
            values in proptest::collection::vec((0u8..3, 0u8..4), 2..64),
            split in 1usize..63,
        ) {
            // labels in 0..3 with 3 == ignore, preds in 0..3
            let split = split.min(values.len() - 1);
            let to_arrays = |pairs: &[(u8, u8)]| {
                let pred = Array2::from_shape_vec((1, pairs.len()), pairs.iter().map(|p| p.0).collect()).unwrap();
                let label = Array2::from_shape_vec((1, pairs.len()), pairs.iter().map(|p| if p.1 == 3 { 255 } else { p.1 }).collect()).unwrap();
                (pred, label)
            };
            let (pred_all, label_all) = to_arrays(&values);
            let mut whole = ConfusionMatrix::new(3, 255).unwrap();
            whole.accumulate(&pred_all, &label_all).unwrap();

            let (pa, la) = to_arrays(&values[..split]);
            let (pb, lb) = to_arrays(&values[split..]);
            let mut left = ConfusionMatrix::new(3, 255).unwrap();
            left.accumulate(&pa, &la).unwrap();
            let mut right = ConfusionMatrix::new(3, 255).unwrap();
            right.accumulate(&pb, &lb).unwrap();
            left.merge(&right);
            prop_assert_eq!(whole, left);
        }
    }
}
