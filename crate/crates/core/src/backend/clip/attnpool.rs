//! Attention pooling head: a mean token attends over all spatial tokens
//! (plus itself), then projects into the joint embedding space. Forward and
//! input-gradient backward.

use ndarray::{s, Array1, Array2, Array3};

use crate::error::Result;

use super::weights::TensorStore;

pub struct AttentionPool {
    /// `[S*S + 1, C]`: class-token row first, then the grid row-major.
    pos_embedding: Array2<f64>,
    grid_side: usize,
    q_w: Array2<f64>,
    q_b: Array1<f64>,
    k_w: Array2<f64>,
    k_b: Array1<f64>,
    v_w: Array2<f64>,
    v_b: Array1<f64>,
    c_w: Array2<f64>,
    c_b: Array1<f64>,
    heads: usize,
}

impl AttentionPool {
    pub fn load(store: &TensorStore, heads: usize) -> Result<Self> {
        let pos = store.get2("visual.attnpool.positional_embedding")?;
        let grid_side = ((pos.dim().0 - 1) as f64).sqrt().round() as usize;
        Ok(AttentionPool {
            pos_embedding: pos,
            grid_side,
            q_w: store.get2("visual.attnpool.q_proj.weight")?,
            q_b: store.get1("visual.attnpool.q_proj.bias")?,
            k_w: store.get2("visual.attnpool.k_proj.weight")?,
            k_b: store.get1("visual.attnpool.k_proj.bias")?,
            v_w: store.get2("visual.attnpool.v_proj.weight")?,
            v_b: store.get1("visual.attnpool.v_proj.bias")?,
            c_w: store.get2("visual.attnpool.c_proj.weight")?,
            c_b: store.get1("visual.attnpool.c_proj.bias")?,
            heads,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.c_b.len()
    }

    /// Positional embedding fitted to an `h x w` grid by bilinear
    /// interpolation (endpoint-aligned; the native grid maps to itself).
    fn positions_for(&self, h: usize, w: usize) -> Array2<f64> {
        let c = self.pos_embedding.dim().1;
        let s_side = self.grid_side;
        if (h, w) == (s_side, s_side) {
            return self.pos_embedding.clone();
        }
        let mut out = Array2::<f64>::zeros((h * w + 1, c));
        out.row_mut(0).assign(&self.pos_embedding.row(0));
        let grid = self.pos_embedding.slice(s![1.., ..]);
        let sample = |gy: f64, gx: f64, ch: usize| -> f64 {
            let y0 = gy.floor() as usize;
            let x0 = gx.floor() as usize;
            let y1 = (y0 + 1).min(s_side - 1);
            let x1 = (x0 + 1).min(s_side - 1);
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let at = |yy: usize, xx: usize| grid[[yy * s_side + xx, ch]];
            at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x1) * (1.0 - fy) * fx
                + at(y1, x0) * fy * (1.0 - fx)
                + at(y1, x1) * fy * fx
        };
        for y in 0..h {
            let gy = if h > 1 {
                y as f64 * (s_side - 1) as f64 / (h - 1) as f64
            } else {
                0.0
            };
            for x in 0..w {
                let gx = if w > 1 {
                    x as f64 * (s_side - 1) as f64 / (w - 1) as f64
                } else {
                    0.0
                };
                for ch in 0..c {
                    out[[1 + y * w + x, ch]] = sample(gy, gx, ch);
                }
            }
        }
        out
    }

    /// Token sequence: mean token prepended to the row-major grid, plus the
    /// positional embedding.
    fn tokens(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let n = h * w;
        let mut seq = Array2::<f64>::zeros((n + 1, c));
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    seq[[1 + y * w + xx, ch]] = x[[ch, y, xx]];
                }
            }
        }
        let mean = seq.slice(s![1.., ..]).sum_axis(ndarray::Axis(0)) / n as f64;
        seq.row_mut(0).assign(&mean);
        seq + &self.positions_for(h, w)
    }

    fn project(&self, w: &Array2<f64>, b: &Array1<f64>, rows: &Array2<f64>) -> Array2<f64> {
        rows.dot(&w.t()) + b
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array1<f64> {
        self.forward_cached(x).0
    }

    /// Forward keeping everything the backward pass needs.
    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array1<f64>, AttnPoolCache) {
        let seq = self.tokens(x);
        let keys = self.project(&self.k_w, &self.k_b, &seq);
        let values = self.project(&self.v_w, &self.v_b, &seq);
        let query = self.q_w.dot(&seq.row(0).to_owned()) + &self.q_b;
        let heads = self.heads;
        let dh = query.len() / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_tokens = seq.dim().0;

        let mut pooled = Array1::<f64>::zeros(query.len());
        let mut attn_per_head = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = query.slice(s![hd * dh..(hd + 1) * dh]);
            let mut logits = Array1::<f64>::zeros(n_tokens);
            for t in 0..n_tokens {
                logits[t] = q.dot(&keys.slice(s![t, hd * dh..(hd + 1) * dh])) * scale;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut probs = logits.mapv(|l| (l - max).exp());
            let denom = probs.sum();
            probs /= denom;
            for t in 0..n_tokens {
                let p = probs[t];
                for d in 0..dh {
                    pooled[hd * dh + d] += p * values[[t, hd * dh + d]];
                }
            }
            attn_per_head.push(probs);
        }
        let out = self.c_w.dot(&pooled) + &self.c_b;
        (
            out,
            AttnPoolCache {
                input_dim: x.dim(),
                query,
                keys,
                values,
                attn: attn_per_head,
            },
        )
    }

    /// Pull an output gradient back onto the input feature map.
    pub fn backward(&self, cache: &AttnPoolCache, grad_out: &Array1<f64>) -> Array3<f64> {
        let (c, h, w) = cache.input_dim;
        let n_tokens = h * w + 1;
        let heads = self.heads;
        let dh = self.q_w.dim().0 / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let g_pooled = self.c_w.t().dot(grad_out);
        let mut g_seq = Array2::<f64>::zeros((n_tokens, self.q_w.dim().1));
        let mut g_query = Array1::<f64>::zeros(cache.query.len());
        let mut g_keys = Array2::<f64>::zeros(cache.keys.dim());
        let mut g_values = Array2::<f64>::zeros(cache.values.dim());

        for hd in 0..heads {
            let probs = &cache.attn[hd];
            let go = g_pooled.slice(s![hd * dh..(hd + 1) * dh]);
            let mut g_logit = Array1::<f64>::zeros(n_tokens);
            let mut dot_sum = 0.0;
            for t in 0..n_tokens {
                let v = cache.values.slice(s![t, hd * dh..(hd + 1) * dh]);
                let dp = go.dot(&v);
                g_logit[t] = dp;
                dot_sum += probs[t] * dp;
                for d in 0..dh {
                    g_values[[t, hd * dh + d]] += probs[t] * go[d];
                }
            }
            // softmax backward
            for t in 0..n_tokens {
                g_logit[t] = probs[t] * (g_logit[t] - dot_sum);
            }
            let q = cache.query.slice(s![hd * dh..(hd + 1) * dh]);
            for t in 0..n_tokens {
                let gl = g_logit[t] * scale;
                for d in 0..dh {
                    g_query[hd * dh + d] += gl * cache.keys[[t, hd * dh + d]];
                    g_keys[[t, hd * dh + d]] += gl * q[d];
                }
            }
        }

        // project back through the q/k/v linear maps
        g_seq.row_mut(0).scaled_add(1.0, &self.q_w.t().dot(&g_query));
        g_seq += &g_keys.dot(&self.k_w);
        g_seq += &g_values.dot(&self.v_w);

        // positional add is identity; undo the mean-token construction
        let n = (h * w) as f64;
        let g_mean = g_seq.row(0).to_owned();
        let mut g_x = Array3::<f64>::zeros((c, h, w));
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    g_x[[ch, y, xx]] = g_seq[[1 + y * w + xx, ch]] + g_mean[ch] / n;
                }
            }
        }
        g_x
    }
}

/// Forward state kept for [`AttentionPool::backward`].
pub struct AttnPoolCache {
    input_dim: (usize, usize, usize),
    query: Array1<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    attn: Vec<Array1<f64>>,
}
