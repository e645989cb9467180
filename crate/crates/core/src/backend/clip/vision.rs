//! Modified anti-aliased ResNet vision trunk: 3-conv stem with average-pool
//! downsampling, bottleneck stages, no attention pooling here. Forward plus
//! input-gradient backward through the upper stages.

use ndarray::{Array1, Array3, Array4};

use crate::error::Result;
use crate::nn;

use super::weights::{TensorStore, VisionConfig};

/// Frozen batch norm folded to per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct BnAffine {
    scale: Array1<f64>,
    shift: Array1<f64>,
}

impl BnAffine {
    fn load(store: &TensorStore, prefix: &str) -> Result<Self> {
        let gamma = store.get1(&format!("{prefix}.weight"))?;
        let beta = store.get1(&format!("{prefix}.bias"))?;
        let mean = store.get1(&format!("{prefix}.running_mean"))?;
        let var = store.get1(&format!("{prefix}.running_var"))?;
        let scale = &gamma / &var.mapv(|v| (v + 1e-5).sqrt());
        let shift = &beta - &(&mean * &scale);
        Ok(BnAffine { scale, shift })
    }

    fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut out = x.clone();
        for (c, mut plane) in out.axis_iter_mut(ndarray::Axis(0)).enumerate() {
            let (a, b) = (self.scale[c], self.shift[c]);
            plane.mapv_inplace(|v| a * v + b);
        }
        out
    }

    fn backward(&self, g: &Array3<f64>) -> Array3<f64> {
        let mut out = g.clone();
        for (c, mut plane) in out.axis_iter_mut(ndarray::Axis(0)).enumerate() {
            let a = self.scale[c];
            plane.mapv_inplace(|v| a * v);
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Array4<f64>,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn load(store: &TensorStore, name: &str, stride: usize, pad: usize) -> Result<Self> {
        Ok(Conv {
            weight: store.get4(&format!("{name}.weight"))?,
            stride,
            pad,
        })
    }

    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        nn::conv2d(x, &self.weight, None, self.stride, self.pad)
    }

    fn backward(&self, g: &Array3<f64>, input_shape: (usize, usize, usize)) -> Array3<f64> {
        nn::conv2d_backward_input(g, &self.weight, input_shape, self.stride, self.pad)
    }
}

/// Bottleneck with average-pool downsampling before the last 1x1 conv.
pub struct Bottleneck {
    conv1: Conv,
    bn1: BnAffine,
    conv2: Conv,
    bn2: BnAffine,
    conv3: Conv,
    bn3: BnAffine,
    stride: usize,
    down: Option<(Conv, BnAffine)>,
}

pub struct BottleneckCache {
    input: Array3<f64>,
    z1: Array3<f64>,
    a1: Array3<f64>,
    z2: Array3<f64>,
    a2: Array3<f64>,
    pooled: Array3<f64>,
    sum: Array3<f64>,
    down_pooled: Option<Array3<f64>>,
}

impl Bottleneck {
    fn load(store: &TensorStore, prefix: &str, has_down: bool, stride: usize) -> Result<Self> {
        let down = if has_down {
            Some((
                Conv::load(store, &format!("{prefix}.downsample.0"), 1, 0)?,
                BnAffine::load(store, &format!("{prefix}.downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1: Conv::load(store, &format!("{prefix}.conv1"), 1, 0)?,
            bn1: BnAffine::load(store, &format!("{prefix}.bn1"))?,
            conv2: Conv::load(store, &format!("{prefix}.conv2"), 1, 1)?,
            bn2: BnAffine::load(store, &format!("{prefix}.bn2"))?,
            conv3: Conv::load(store, &format!("{prefix}.conv3"), 1, 0)?,
            bn3: BnAffine::load(store, &format!("{prefix}.bn3"))?,
            stride,
            down,
        })
    }

    fn forward(&self, x: &Array3<f64>, keep: bool) -> (Array3<f64>, Option<BottleneckCache>) {
        let z1 = self.bn1.apply(&self.conv1.forward(x));
        let a1 = nn::relu(&z1);
        let z2 = self.bn2.apply(&self.conv2.forward(&a1));
        let a2 = nn::relu(&z2);
        let pooled = if self.stride > 1 {
            nn::avg_pool2d(&a2, self.stride)
        } else {
            a2.clone()
        };
        let main = self.bn3.apply(&self.conv3.forward(&pooled));
        let (identity, down_pooled) = match &self.down {
            Some((conv, bn)) => {
                let dp = if self.stride > 1 {
                    nn::avg_pool2d(x, self.stride)
                } else {
                    x.clone()
                };
                (bn.apply(&conv.forward(&dp)), Some(dp))
            }
            None => (x.clone(), None),
        };
        let sum = &main + &identity;
        let out = nn::relu(&sum);
        let cache = keep.then(|| BottleneckCache {
            input: x.clone(),
            z1,
            a1,
            z2,
            a2,
            pooled,
            sum,
            down_pooled,
        });
        (out, cache)
    }

    fn backward(&self, cache: &BottleneckCache, grad_out: &Array3<f64>) -> Array3<f64> {
        let g_sum = nn::relu_backward(grad_out, &cache.sum);
        // main branch
        let g_main = self.bn3.backward(&g_sum);
        let g_pooled = self.conv3.backward(&g_main, cache.pooled.dim());
        let g_a2 = if self.stride > 1 {
            nn::avg_pool2d_backward(&g_pooled, cache.a2.dim(), self.stride)
        } else {
            g_pooled
        };
        let g_z2 = nn::relu_backward(&g_a2, &cache.z2);
        let g_a1 = self.conv2.backward(&self.bn2.backward(&g_z2), cache.a1.dim());
        let g_z1 = nn::relu_backward(&g_a1, &cache.z1);
        let mut g_in = self.conv1.backward(&self.bn1.backward(&g_z1), cache.input.dim());
        // identity branch
        match (&self.down, &cache.down_pooled) {
            (Some((conv, bn)), Some(dp)) => {
                let g_dp = conv.backward(&bn.backward(&g_sum), dp.dim());
                g_in += &if self.stride > 1 {
                    nn::avg_pool2d_backward(&g_dp, cache.input.dim(), self.stride)
                } else {
                    g_dp
                };
            }
            _ => g_in += &g_sum,
        }
        g_in
    }
}

/// The full vision trunk split after stage 1: the stem plus stage 1 are the
/// frozen low-level path; stages 2-4 are the upper path the mining loop
/// differentiates through.
pub struct VisionTrunk {
    stem_convs: [Conv; 3],
    stem_bns: [BnAffine; 3],
    stages: [Vec<Bottleneck>; 4],
    pub low_channels: usize,
    pub high_channels: usize,
}

impl VisionTrunk {
    pub fn load(store: &TensorStore, cfg: &VisionConfig) -> Result<Self> {
        let w = cfg.width;
        let stem_convs = [
            Conv::load(store, "visual.conv1", 2, 1)?,
            Conv::load(store, "visual.conv2", 1, 1)?,
            Conv::load(store, "visual.conv3", 1, 1)?,
        ];
        let stem_bns = [
            BnAffine::load(store, "visual.bn1")?,
            BnAffine::load(store, "visual.bn2")?,
            BnAffine::load(store, "visual.bn3")?,
        ];
        let mut stages: [Vec<Bottleneck>; 4] = [vec![], vec![], vec![], vec![]];
        for (si, stage) in stages.iter_mut().enumerate() {
            let stride = if si == 0 { 1 } else { 2 };
            for bi in 0..cfg.blocks[si] {
                let prefix = format!("visual.layer{}.{}", si + 1, bi);
                // first block of each stage carries the downsample path
                let has_down = bi == 0;
                let s = if bi == 0 { stride } else { 1 };
                stage.push(Bottleneck::load(store, &prefix, has_down, s)?);
            }
        }
        Ok(VisionTrunk {
            stem_convs,
            stem_bns,
            stages,
            low_channels: w * 4,
            high_channels: w * 32,
        })
    }

    /// Stem plus stage 1: pixel input (already normalized) to low features.
    pub fn forward_low(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut h = x.clone();
        for (conv, bn) in self.stem_convs.iter().zip(self.stem_bns.iter()) {
            h = nn::relu(&bn.apply(&conv.forward(&h)));
        }
        h = nn::avg_pool2d(&h, 2);
        for block in &self.stages[0] {
            h = block.forward(&h, false).0;
        }
        h
    }

    /// Stages 2-4 without caches.
    pub fn forward_high(&self, low: &Array3<f64>) -> Array3<f64> {
        let mut h = low.clone();
        for stage in &self.stages[1..] {
            for block in stage {
                h = block.forward(&h, false).0;
            }
        }
        h
    }

    /// Stages 2-4, keeping per-block caches for the backward pass.
    pub fn forward_high_cached(&self, low: &Array3<f64>) -> (Array3<f64>, Vec<BottleneckCache>) {
        let mut h = low.clone();
        let mut caches = Vec::new();
        for stage in &self.stages[1..] {
            for block in stage {
                let (out, cache) = block.forward(&h, true);
                caches.push(cache.expect("cache requested"));
                h = out;
            }
        }
        (h, caches)
    }

    /// Pull a gradient at the stage-4 output back to the stage-1 output.
    pub fn backward_high(&self, caches: &[BottleneckCache], grad_out: &Array3<f64>) -> Array3<f64> {
        let blocks: Vec<&Bottleneck> = self.stages[1..].iter().flatten().collect();
        debug_assert_eq!(blocks.len(), caches.len());
        let mut g = grad_out.clone();
        for (block, cache) in blocks.iter().zip(caches.iter()).rev() {
            g = block.backward(cache, &g);
        }
        g
    }
}
