//! Minimal layer toolkit: conv2d, pooling, linear, ReLU and resampling with
//! hand-written backward passes.
//!
//! Forward convolution goes through im2col + matrix multiply. Backward
//! functions compute vector-Jacobian products; weight gradients exist only
//! where a trainable consumer (the classifier head) needs them.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

/// Output spatial extent of a convolution/pooling window.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Unfold `input` into a `[C*kh*kw, H_out*W_out]` matrix.
fn im2col(input: &Array3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox * stride + kj;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = input[[ci, iy, ix - pad]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `[C*kh*kw, H_out*W_out]` matrix back onto the input grid,
/// accumulating overlaps. Adjoint of [`im2col`].
fn col2im(
    cols: &Array2<f64>,
    shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c, h, w) = shape;
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut out = Array3::<f64>::zeros(shape);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox * stride + kj;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        out[[ci, iy, ix - pad]] += cols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    out
}

/// 2D convolution. `weight` is `[C_out, C_in, kh, kw]`.
pub fn conv2d(
    input: &Array3<f64>,
    weight: &Array4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (co, ci, kh, kw) = weight.dim();
    debug_assert_eq!(ci, input.dim().0, "conv2d input channels");
    let (_, h, w) = input.dim();
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let cols = im2col(input, kh, kw, stride, pad);
    let wmat = weight.view().into_shape_with_order((co, ci * kh * kw)).unwrap();
    let mut out = wmat.dot(&cols);
    if let Some(b) = bias {
        for (mut row, bv) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row.mapv_inplace(|x| x + bv);
        }
    }
    out.into_shape_with_order((co, ho, wo)).unwrap()
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input(
    grad_out: &Array3<f64>,
    weight: &Array4<f64>,
    input_shape: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (co, ci, kh, kw) = weight.dim();
    let (_, ho, wo) = grad_out.dim();
    let gmat = grad_out.view().into_shape_with_order((co, ho * wo)).unwrap();
    let wmat = weight.view().into_shape_with_order((co, ci * kh * kw)).unwrap();
    let grad_cols = wmat.t().dot(&gmat);
    col2im(&grad_cols, input_shape, kh, kw, stride, pad)
}

/// Gradients of a convolution with respect to its weight and bias.
pub fn conv2d_backward_params(
    grad_out: &Array3<f64>,
    input: &Array3<f64>,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array1<f64>) {
    let (kh, kw) = kernel;
    let (co, ho, wo) = grad_out.dim();
    let ci = input.dim().0;
    let cols = im2col(input, kh, kw, stride, pad);
    let gmat = grad_out.view().into_shape_with_order((co, ho * wo)).unwrap();
    let gw = gmat.dot(&cols.t());
    let grad_weight = gw.into_shape_with_order((co, ci, kh, kw)).unwrap();
    let grad_bias = grad_out.sum_axis(Axis(2)).sum_axis(Axis(1));
    (grad_weight, grad_bias)
}

/// ReLU, returning the activation.
pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the forward *input* (mask where input > 0).
pub fn relu_backward(grad_out: &Array3<f64>, forward_input: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(forward_input, |gv, xv| {
        if *xv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// Non-overlapping average pooling with window = stride = `k`.
pub fn avg_pool2d(input: &Array3<f64>, k: usize) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let (ho, wo) = (h / k, w / k);
    let mut out = Array3::<f64>::zeros((c, ho, wo));
    let inv = 1.0 / (k * k) as f64;
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += input[[ci, oy * k + dy, ox * k + dx]];
                    }
                }
                out[[ci, oy, ox]] = acc * inv;
            }
        }
    }
    out
}

/// Backward through non-overlapping average pooling.
pub fn avg_pool2d_backward(grad_out: &Array3<f64>, input_shape: (usize, usize, usize), k: usize) -> Array3<f64> {
    let (c, _, _) = grad_out.dim();
    let mut g = Array3::<f64>::zeros(input_shape);
    let inv = 1.0 / (k * k) as f64;
    let (_, ho, wo) = grad_out.dim();
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let v = grad_out[[ci, oy, ox]] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        g[[ci, oy * k + dy, ox * k + dx]] += v;
                    }
                }
            }
        }
    }
    g
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(input: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let mut out = Array3::<f64>::zeros((c, h * factor, w * factor));
    for ci in 0..c {
        for y in 0..h * factor {
            for x in 0..w * factor {
                out[[ci, y, x]] = input[[ci, y / factor, x / factor]];
            }
        }
    }
    out
}

/// Backward through nearest upsampling: sum each factor x factor block.
pub fn upsample_nearest_backward(grad_out: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = grad_out.dim();
    let (ho, wo) = (h / factor, w / factor);
    let mut g = Array3::<f64>::zeros((c, ho, wo));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                g[[ci, y / factor, x / factor]] += grad_out[[ci, y, x]];
            }
        }
    }
    g
}

/// Spatial mean over H and W, yielding one value per channel.
pub fn spatial_mean(input: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = input.dim();
    input.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

/// Backward through the spatial mean.
pub fn spatial_mean_backward(grad_out: &Array1<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
    let (c, h, w) = shape;
    let inv = 1.0 / (h * w) as f64;
    let mut g = Array3::<f64>::zeros(shape);
    for ci in 0..c {
        g.index_axis_mut(Axis(0), ci).fill(grad_out[ci] * inv);
    }
    g
}

/// Dense layer `w x + b` with `w: [out, in]`.
pub fn linear(x: &Array1<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Array1<f64> {
    let mut y = w.dot(x);
    if let Some(b) = b {
        y += b;
    }
    y
}

/// Gradient of a dense layer with respect to its input.
pub fn linear_backward_input(grad_out: &Array1<f64>, w: &Array2<f64>) -> Array1<f64> {
    w.t().dot(grad_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array3, Array4};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_known_values() {
        // 1x3x3 input, single 2x2 kernel of ones, stride 1, no pad: windowed sums
        let input = Array3::from_shape_vec((1, 3, 3), (1..=9).map(|v| v as f64).collect()).unwrap();
        let weight = Array4::from_elem((1, 1, 2, 2), 1.0);
        let out = conv2d(&input, &weight, None, 1, 0);
        assert_eq!(out.dim(), (1, 2, 2));
        assert_abs_diff_eq!(out[[0, 0, 0]], 1.0 + 2.0 + 4.0 + 5.0);
        assert_abs_diff_eq!(out[[0, 1, 1]], 5.0 + 6.0 + 8.0 + 9.0);
    }

    #[test]
    fn conv2d_backward_input_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand3(&mut rng, (2, 5, 5));
        let weight = rand4(&mut rng, (3, 2, 3, 3));
        let upstream = rand3(&mut rng, (3, 3, 3));
        // scalar objective: sum(upstream * conv(input))
        let analytic = conv2d_backward_input(&upstream, &weight, input.dim(), 2, 1);
        let h = 1e-6;
        for idx in [[0, 0, 0], [1, 2, 3], [0, 4, 4], [1, 0, 2]] {
            let mut plus = input.clone();
            plus[idx] += h;
            let mut minus = input.clone();
            minus[idx] -= h;
            let lp = (&conv2d(&plus, &weight, None, 2, 1) * &upstream).sum();
            let lm = (&conv2d(&minus, &weight, None, 2, 1) * &upstream).sum();
            assert_abs_diff_eq!(analytic[idx], (lp - lm) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn conv2d_backward_params_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand3(&mut rng, (2, 4, 4));
        let weight = rand4(&mut rng, (2, 2, 3, 3));
        let bias = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0));
        let upstream = rand3(&mut rng, (2, 4, 4));
        let (gw, gb) = conv2d_backward_params(&upstream, &input, (3, 3), 1, 1);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 0]] {
            let mut plus = weight.clone();
            plus[idx] += h;
            let mut minus = weight.clone();
            minus[idx] -= h;
            let lp = (&conv2d(&input, &plus, Some(&bias), 1, 1) * &upstream).sum();
            let lm = (&conv2d(&input, &minus, Some(&bias), 1, 1) * &upstream).sum();
            assert_abs_diff_eq!(gw[idx], (lp - lm) / (2.0 * h), epsilon = 1e-6);
        }
        for c in 0..2 {
            let mut bp = bias.clone();
            bp[c] += h;
            let mut bm = bias.clone();
            bm[c] -= h;
            let lp = (&conv2d(&input, &weight, Some(&bp), 1, 1) * &upstream).sum();
            let lm = (&conv2d(&input, &weight, Some(&bm), 1, 1) * &upstream).sum();
            assert_abs_diff_eq!(gb[c], (lp - lm) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn pooling_roundtrip_shapes_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand3(&mut rng, (2, 4, 4));
        let out = avg_pool2d(&input, 2);
        assert_eq!(out.dim(), (2, 2, 2));
        // adjoint identity: <pool(x), g> == <x, pool_backward(g)>
        let g = rand3(&mut rng, (2, 2, 2));
        let lhs = (&out * &g).sum();
        let rhs = (&input * &avg_pool2d_backward(&g, input.dim(), 2)).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn upsample_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = rand3(&mut rng, (3, 2, 2));
        let up = upsample_nearest(&input, 2);
        assert_eq!(up.dim(), (3, 4, 4));
        let g = rand3(&mut rng, (3, 4, 4));
        let lhs = (&up * &g).sum();
        let rhs = (&input * &upsample_nearest_backward(&g, 2)).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn spatial_mean_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = rand3(&mut rng, (4, 3, 3));
        let m = spatial_mean(&input);
        let g = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let lhs = m.dot(&g);
        let rhs = (&input * &spatial_mean_backward(&g, input.dim())).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }
}
