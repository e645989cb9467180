//! Causal text transformer: token + positional embeddings, residual
//! attention blocks with QuickGELU MLPs, final layer norm, projection of the
//! end-of-text row into the joint space. Forward plus the pullback onto
//! chosen input-embedding rows (for concept optimization).

use ndarray::{s, Array1, Array2, Array3};

use crate::error::{Error, Result};

use super::weights::{TensorStore, TextConfig};

#[derive(Debug, Clone)]
struct LayerNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    fn load(store: &TensorStore, prefix: &str) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.get1(&format!("{prefix}.weight"))?,
            beta: store.get1(&format!("{prefix}.bias"))?,
        })
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let (l, w) = x.dim();
        let mut out = Array2::<f64>::zeros((l, w));
        let mut xhat = Array2::<f64>::zeros((l, w));
        let mut inv_std = Vec::with_capacity(l);
        for i in 0..l {
            let row = x.row(i);
            let mean = row.sum() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..w {
                let h = (x[[i, j]] - mean) * inv;
                xhat[[i, j]] = h;
                out[[i, j]] = h * self.gamma[j] + self.beta[j];
            }
        }
        (out, LnCache { xhat, inv_std })
    }

    fn backward(&self, cache: &LnCache, g: &Array2<f64>) -> Array2<f64> {
        let (l, w) = g.dim();
        let mut out = Array2::<f64>::zeros((l, w));
        for i in 0..l {
            let mut gh_mean = 0.0;
            let mut ghx_mean = 0.0;
            for j in 0..w {
                let gh = g[[i, j]] * self.gamma[j];
                gh_mean += gh;
                ghx_mean += gh * cache.xhat[[i, j]];
            }
            gh_mean /= w as f64;
            ghx_mean /= w as f64;
            for j in 0..w {
                let gh = g[[i, j]] * self.gamma[j];
                out[[i, j]] = cache.inv_std[i] * (gh - gh_mean - cache.xhat[[i, j]] * ghx_mean);
            }
        }
        out
    }
}

struct Attention {
    in_w: Array2<f64>,
    in_b: Array1<f64>,
    out_w: Array2<f64>,
    out_b: Array1<f64>,
    heads: usize,
}

struct AttnCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `[head, query, key]` probabilities (causal).
    probs: Array3<f64>,
    concat: Array2<f64>,
}

impl Attention {
    fn load(store: &TensorStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Attention {
            in_w: store.get2(&format!("{prefix}.in_proj_weight"))?,
            in_b: store.get1(&format!("{prefix}.in_proj_bias"))?,
            out_w: store.get2(&format!("{prefix}.out_proj.weight"))?,
            out_b: store.get1(&format!("{prefix}.out_proj.bias"))?,
            heads,
        })
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let (l, w) = x.dim();
        let qkv = x.dot(&self.in_w.t()) + &self.in_b;
        let q = qkv.slice(s![.., 0..w]).to_owned();
        let k = qkv.slice(s![.., w..2 * w]).to_owned();
        let v = qkv.slice(s![.., 2 * w..3 * w]).to_owned();
        let heads = self.heads;
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut probs = Array3::<f64>::zeros((heads, l, l));
        let mut concat = Array2::<f64>::zeros((l, w));
        for hd in 0..heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            for i in 0..l {
                // causal: attend to positions <= i
                let mut logits = Vec::with_capacity(i + 1);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let d = qh.row(i).dot(&kh.row(j)) * scale;
                    max = max.max(d);
                    logits.push(d);
                }
                let mut denom = 0.0;
                for lg in &mut logits {
                    *lg = (*lg - max).exp();
                    denom += *lg;
                }
                for (j, lg) in logits.iter().enumerate() {
                    let p = lg / denom;
                    probs[[hd, i, j]] = p;
                    for d in 0..dh {
                        concat[[i, hd * dh + d]] += p * vh[[j, d]];
                    }
                }
            }
        }
        let out = concat.dot(&self.out_w.t()) + &self.out_b;
        (
            out,
            AttnCache {
                input: x.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    fn backward(&self, cache: &AttnCache, g: &Array2<f64>) -> Array2<f64> {
        let (l, w) = cache.input.dim();
        let heads = self.heads;
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let g_concat = g.dot(&self.out_w);

        let mut g_q = Array2::<f64>::zeros((l, w));
        let mut g_k = Array2::<f64>::zeros((l, w));
        let mut g_v = Array2::<f64>::zeros((l, w));
        for hd in 0..heads {
            for i in 0..l {
                // probabilities over keys j <= i
                let mut g_logit = vec![0.0; i + 1];
                let mut dot_sum = 0.0;
                for j in 0..=i {
                    let p = cache.probs[[hd, i, j]];
                    let mut dp = 0.0;
                    for d in 0..dh {
                        dp += g_concat[[i, hd * dh + d]] * cache.v[[j, hd * dh + d]];
                        g_v[[j, hd * dh + d]] += p * g_concat[[i, hd * dh + d]];
                    }
                    g_logit[j] = dp;
                    dot_sum += p * dp;
                }
                for j in 0..=i {
                    let p = cache.probs[[hd, i, j]];
                    let gl = p * (g_logit[j] - dot_sum) * scale;
                    for d in 0..dh {
                        g_q[[i, hd * dh + d]] += gl * cache.k[[j, hd * dh + d]];
                        g_k[[j, hd * dh + d]] += gl * cache.q[[i, hd * dh + d]];
                    }
                }
            }
        }
        // stack [g_q | g_k | g_v] back through the packed input projection
        let mut g_qkv = Array2::<f64>::zeros((l, 3 * w));
        g_qkv.slice_mut(s![.., 0..w]).assign(&g_q);
        g_qkv.slice_mut(s![.., w..2 * w]).assign(&g_k);
        g_qkv.slice_mut(s![.., 2 * w..3 * w]).assign(&g_v);
        g_qkv.dot(&self.in_w)
    }
}

fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(1.702 * x)
}

fn quick_gelu_grad(x: f64) -> f64 {
    let s = sigmoid(1.702 * x);
    s + x * 1.702 * s * (1.0 - s)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc_w: Array2<f64>,
    fc_b: Array1<f64>,
    proj_w: Array2<f64>,
    proj_b: Array1<f64>,
}

struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    fc_pre: Array2<f64>,
}

impl Block {
    fn load(store: &TensorStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::load(store, &format!("{prefix}.ln_1"))?,
            attn: Attention::load(store, &format!("{prefix}.attn"), heads)?,
            ln2: LayerNorm::load(store, &format!("{prefix}.ln_2"))?,
            fc_w: store.get2(&format!("{prefix}.mlp.c_fc.weight"))?,
            fc_b: store.get1(&format!("{prefix}.mlp.c_fc.bias"))?,
            proj_w: store.get2(&format!("{prefix}.mlp.c_proj.weight"))?,
            proj_b: store.get1(&format!("{prefix}.mlp.c_proj.bias"))?,
        })
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (n1, ln1_cache) = self.ln1.forward(x);
        let (a, attn_cache) = self.attn.forward(&n1);
        let x1 = x + &a;
        let (n2, ln2_cache) = self.ln2.forward(&x1);
        let fc_pre = n2.dot(&self.fc_w.t()) + &self.fc_b;
        let h = fc_pre.mapv(quick_gelu);
        let m = h.dot(&self.proj_w.t()) + &self.proj_b;
        (
            &x1 + &m,
            BlockCache {
                ln1: ln1_cache,
                attn: attn_cache,
                ln2: ln2_cache,
                fc_pre,
            },
        )
    }

    fn backward(&self, cache: &BlockCache, g: &Array2<f64>) -> Array2<f64> {
        // mlp branch
        let g_h = g.dot(&self.proj_w);
        let g_fc_pre = &g_h * &cache.fc_pre.mapv(quick_gelu_grad);
        let g_n2 = g_fc_pre.dot(&self.fc_w);
        let g_x1 = g + &self.ln2.backward(&cache.ln2, &g_n2);
        // attention branch
        let g_n1 = self.attn.backward(&cache.attn, &g_x1);
        &g_x1 + &self.ln1.backward(&cache.ln1, &g_n1)
    }
}

pub struct TextTransformer {
    pub token_embedding: Array2<f64>,
    positional: Array2<f64>,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    /// `[width, output_dim]`, applied as `row . projection`.
    projection: Array2<f64>,
    pub config: TextConfig,
    pub token_std: f64,
}

impl TextTransformer {
    pub fn load(store: &TensorStore, cfg: &TextConfig) -> Result<Self> {
        let token_embedding = store.get2("token_embedding.weight")?;
        let n = token_embedding.len() as f64;
        let mean = token_embedding.sum() / n;
        let token_std =
            (token_embedding.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let blocks = (0..cfg.layers)
            .map(|i| Block::load(store, &format!("transformer.resblocks.{i}"), cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextTransformer {
            token_embedding,
            positional: store.get2("positional_embedding")?,
            blocks,
            ln_final: LayerNorm::load(store, "ln_final")?,
            projection: store.get2("text_projection")?,
            config: cfg.clone(),
            token_std,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn embed_rows(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut rows = Array2::<f64>::zeros((ids.len(), self.width()));
        for (i, id) in ids.iter().enumerate() {
            if *id >= self.token_embedding.dim().0 {
                return Err(Error::validation(format!("token id {id} out of vocabulary")));
            }
            rows.row_mut(i).assign(&self.token_embedding.row(*id));
        }
        Ok(rows)
    }

    fn check_len(&self, l: usize) -> Result<()> {
        if l > self.config.context_length {
            return Err(Error::validation(format!(
                "sequence of {l} tokens exceeds context length {}",
                self.config.context_length
            )));
        }
        Ok(())
    }

    /// Encode a sequence of input embeddings; the joint-space output is read
    /// at `eot_index` after the final layer norm.
    pub fn forward_embeddings(&self, embs: &Array2<f64>, eot_index: usize) -> Result<Array1<f64>> {
        Ok(self.forward_cached(embs, eot_index)?.0)
    }

    /// Forward keeping the per-block state the backward pass needs.
    pub fn forward_cached(
        &self,
        embs: &Array2<f64>,
        eot_index: usize,
    ) -> Result<(Array1<f64>, TextCache)> {
        let l = embs.dim().0;
        self.check_len(l)?;
        if eot_index >= l {
            return Err(Error::validation("eot index outside sequence"));
        }
        let mut x = embs + &self.positional.slice(s![0..l, ..]);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = block.forward(&x);
            blocks.push(cache);
            x = out;
        }
        let (normed, ln_final) = self.ln_final.forward(&x);
        let out = normed.row(eot_index).dot(&self.projection);
        Ok((
            out,
            TextCache {
                blocks,
                ln_final,
                eot_index,
                seq_len: l,
            },
        ))
    }

    /// Pull an output gradient back onto the input-embedding rows
    /// `grad_rows` (e.g. the concept slots).
    pub fn backward(
        &self,
        cache: &TextCache,
        grad_out: &Array1<f64>,
        grad_rows: std::ops::Range<usize>,
    ) -> Array2<f64> {
        let (l, w) = (cache.seq_len, self.width());
        let g_row = self.projection.dot(grad_out);
        let mut g_normed = Array2::<f64>::zeros((l, w));
        g_normed.row_mut(cache.eot_index).assign(&g_row);
        let mut g = self.ln_final.backward(&cache.ln_final, &g_normed);
        for (block, block_cache) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            g = block.backward(block_cache, &g);
        }
        // positional add is identity in the input gradient
        g.slice(s![grad_rows, ..]).to_owned()
    }
}

/// Forward state kept for [`TextTransformer::backward`].
pub struct TextCache {
    blocks: Vec<BlockCache>,
    ln_final: LnCache,
    eot_index: usize,
    seq_len: usize,
}
