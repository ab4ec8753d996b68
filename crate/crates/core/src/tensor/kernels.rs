//! Shared numeric kernels used by both the eval and graph backends.
//!
//! Everything here is plain forward/adjoint arithmetic on `f64` arrays; the
//! autodiff bookkeeping lives in [`super::graph`].

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4};

/// 5-tap binomial kernel used by the Gaussian pyramid, normalized to sum 1.
pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` (C,H,W) into a (C*kh*kw, Ho*Wo) column matrix with zero padding.
pub fn im2col(
    x: ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                for oi in 0..ho {
                    let ii = (oi * stride + u) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + v) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back into image layout.
pub fn col2im(
    gcols: ArrayView2<f64>,
    x_shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c, h, w) = x_shape;
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                for oi in 0..ho {
                    let ii = (oi * stride + u) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + v) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gx[[ci, ii as usize, jj as usize]] += gcols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    gx
}

/// Convolution forward. Returns the output map and the column matrix, which
/// the backward pass reuses.
pub fn conv2d_forward(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    b: ArrayView1<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (co, ci, kh, kw) = w.dim();
    let (xc, h, ww) = x.dim();
    assert_eq!(ci, xc, "conv2d channel mismatch");
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(ww, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let w_mat = w.into_shape((co, ci * kh * kw)).expect("conv weight reshape");
    let mut y_mat = w_mat.dot(&cols);
    for (mut row, bi) in y_mat.outer_iter_mut().zip(b.iter()) {
        row += *bi;
    }
    let y = y_mat.into_shape((co, ho, wo)).expect("conv output reshape");
    (y, cols)
}

/// Convolution backward: gradients for input, weight, and bias.
pub fn conv2d_backward(
    gy: ArrayView3<f64>,
    cols: &Array2<f64>,
    w: ArrayView4<f64>,
    x_shape: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (co, ci, kh, kw) = w.dim();
    let (gc, ho, wo) = gy.dim();
    assert_eq!(gc, co);
    let g_mat = gy.into_shape((co, ho * wo)).expect("grad reshape");
    let gw_mat = g_mat.dot(&cols.t());
    let gw = gw_mat.into_shape((co, ci, kh, kw)).expect("gw reshape");
    let gb = g_mat.sum_axis(ndarray::Axis(1));
    let w_mat = w.into_shape((co, ci * kh * kw)).expect("conv weight reshape");
    let gcols = w_mat.t().dot(&g_mat);
    let gx = col2im(gcols.view(), x_shape, kh, kw, stride, pad);
    (gx, gw, gb)
}

/// Per-channel instance normalization over the spatial dims.
/// Returns the output plus per-channel mean and inverse std for backward.
pub fn instance_norm_forward(
    x: ArrayView3<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut y = Array3::<f64>::zeros((c, h, w));
    let mut mean = Array1::<f64>::zeros(c);
    let mut istd = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let xc = x.slice(s![ci, .., ..]);
        let mu = xc.sum() / n;
        let var = xc.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        mean[ci] = mu;
        istd[ci] = is;
        let (g, b) = (gamma[ci], beta[ci]);
        let mut yc = y.slice_mut(s![ci, .., ..]);
        yc.zip_mut_with(&xc, |o, &v| *o = g * (v - mu) * is + b);
    }
    (y, mean, istd)
}

/// Instance-norm backward for input, gamma, and beta.
pub fn instance_norm_backward(
    gy: ArrayView3<f64>,
    x: ArrayView3<f64>,
    gamma: ArrayView1<f64>,
    mean: ArrayView1<f64>,
    istd: ArrayView1<f64>,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut gx = Array3::<f64>::zeros((c, h, w));
    let mut ggamma = Array1::<f64>::zeros(c);
    let mut gbeta = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let xc = x.slice(s![ci, .., ..]);
        let gc = gy.slice(s![ci, .., ..]);
        let (mu, is) = (mean[ci], istd[ci]);
        let mut sum_g = 0.0;
        let mut sum_gxh = 0.0;
        for (gv, xv) in gc.iter().zip(xc.iter()) {
            let xh = (xv - mu) * is;
            sum_g += gv;
            sum_gxh += gv * xh;
        }
        ggamma[ci] = sum_gxh;
        gbeta[ci] = sum_g;
        let (mg, mgxh) = (sum_g / n, sum_gxh / n);
        let coeff = gamma[ci] * is;
        let mut gxc = gx.slice_mut(s![ci, .., ..]);
        for ((o, gv), xv) in gxc.iter_mut().zip(gc.iter()).zip(xc.iter()) {
            let xh = (xv - mu) * is;
            *o = coeff * (gv - mg - xh * mgxh);
        }
    }
    (gx, ggamma, gbeta)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward(x: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<f64>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[[ci, i, j]];
                y[[ci, 2 * i, 2 * j]] = v;
                y[[ci, 2 * i + 1, 2 * j]] = v;
                y[[ci, 2 * i, 2 * j + 1]] = v;
                y[[ci, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    y
}

/// Adjoint of nearest 2x upsampling: 2x2 block sum.
pub fn upsample2_backward(gy: ArrayView3<f64>) -> Array3<f64> {
    let (c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                gx[[ci, i, j]] = gy[[ci, 2 * i, 2 * j]]
                    + gy[[ci, 2 * i + 1, 2 * j]]
                    + gy[[ci, 2 * i, 2 * j + 1]]
                    + gy[[ci, 2 * i + 1, 2 * j + 1]];
            }
        }
    }
    gx
}

fn clamp_idx(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Separable 5-tap binomial blur with replicate borders.
pub fn blur5(x: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    // rows pass
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, k) in BINOMIAL5.iter().enumerate() {
                    let jj = clamp_idx(j as isize + t as isize - 2, w);
                    acc += k * x[[ci, i, jj]];
                }
                tmp[[ci, i, j]] = acc;
            }
        }
    }
    // cols pass
    let mut y = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, k) in BINOMIAL5.iter().enumerate() {
                    let ii = clamp_idx(i as isize + t as isize - 2, h);
                    acc += k * tmp[[ci, ii, j]];
                }
                y[[ci, i, j]] = acc;
            }
        }
    }
    y
}

/// Adjoint of [`blur5`]: the same taps applied as scatter-adds.
pub fn blur5_adjoint(gy: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = gy.dim();
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let g = gy[[ci, i, j]];
                for (t, k) in BINOMIAL5.iter().enumerate() {
                    let ii = clamp_idx(i as isize + t as isize - 2, h);
                    tmp[[ci, ii, j]] += k * g;
                }
            }
        }
    }
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let g = tmp[[ci, i, j]];
                for (t, k) in BINOMIAL5.iter().enumerate() {
                    let jj = clamp_idx(j as isize + t as isize - 2, w);
                    gx[[ci, i, jj]] += k * g;
                }
            }
        }
    }
    gx
}

/// One pyramid REDUCE step: binomial blur then 2x decimation.
pub fn blur_decimate_forward(x: ArrayView3<f64>) -> Array3<f64> {
    let blurred = blur5(x);
    let (c, h, w) = blurred.dim();
    let mut y = Array3::<f64>::zeros((c, h / 2, w / 2));
    for ci in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                y[[ci, i, j]] = blurred[[ci, 2 * i, 2 * j]];
            }
        }
    }
    y
}

/// Adjoint of [`blur_decimate_forward`]: zero-stuff then adjoint blur.
pub fn blur_decimate_backward(gy: ArrayView3<f64>, x_shape: (usize, usize, usize)) -> Array3<f64> {
    let (c, h, w) = x_shape;
    let mut stuffed = Array3::<f64>::zeros((c, h, w));
    let (_, hd, wd) = gy.dim();
    for ci in 0..c {
        for i in 0..hd {
            for j in 0..wd {
                stuffed[[ci, 2 * i, 2 * j]] = gy[[ci, i, j]];
            }
        }
    }
    blur5_adjoint(stuffed.view())
}

/// Row-wise stabilized log-sum-exp. `-inf` entries are legal and contribute 0.
pub fn row_logsumexp(x: ArrayView2<f64>) -> Array1<f64> {
    let (m, _) = x.dim();
    let mut out = Array1::<f64>::zeros(m);
    for (i, row) in x.outer_iter().enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        debug_assert!(mx.is_finite(), "logsumexp row with no finite entry");
        let sum: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        out[i] = mx + sum.ln();
    }
    out
}

/// Euclidean norms of matrix rows.
pub fn row_norms(x: ArrayView2<f64>) -> Array1<f64> {
    x.outer_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}
