//! Forward/backward kernels on raw row-major slices, shared by inference and
//! training.

#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

use crate::linalg::{gemm_acc, Matrix};

/// Geometry of a 2-d convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.k_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// `y = x Wᵀ + b` for a batch `x` of shape `n × in`.
pub fn dense_forward(x: &[f64], n: usize, w: &Matrix, b: &[f64]) -> Vec<f64> {
    let (out, inp) = w.shape();
    let wt = w.transpose();
    let mut y = vec![0.0; n * out];
    for i in 0..n {
        y[i * out..(i + 1) * out].copy_from_slice(b);
    }
    gemm_acc(&x[..n * inp], wt.as_slice(), &mut y, n, inp, out);
    y
}

/// Accumulates `dW += dyᵀ x`, `db += Σ dy` and returns `dx = dy W`.
pub fn dense_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    w: &Matrix,
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let (out, inp) = w.shape();
    for i in 0..n {
        let dyi = &dy[i * out..(i + 1) * out];
        let xi = &x[i * inp..(i + 1) * inp];
        for (o, &g) in dyi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let row = &mut dw[o * inp..(o + 1) * inp];
            for (r, &xv) in row.iter_mut().zip(xi) {
                *r += g * xv;
            }
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![0.0; n * inp];
    gemm_acc(dy, w.as_slice(), &mut dx, n, out, inp);
    dx
}

/// Unfolds one image (`c × h × w`) into a `patch_len × out_positions` matrix.
pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npos = oh * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * npos);
    let pad = g.padding as isize;
    for c in 0..g.in_c {
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = (c * g.k_h + kh) * g.k_w + kw;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for y in 0..oh {
                    let iy = (y * g.stride + kh) as isize - pad;
                    for x in 0..ow {
                        let ix = (x * g.stride + kw) as isize - pad;
                        dst[y * ow + x] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.in_h
                            && (ix as usize) < g.in_w
                        {
                            img[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back into an image gradient.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npos = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_c {
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = (c * g.k_h + kh) * g.k_w + kw;
                let src = &cols[row * npos..(row + 1) * npos];
                for y in 0..oh {
                    let iy = (y * g.stride + kh) as isize - pad;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    for x in 0..ow {
                        let ix = (x * g.stride + kw) as isize - pad;
                        if ix < 0 || ix as usize >= g.in_w {
                            continue;
                        }
                        img[(c * g.in_h + iy as usize) * g.in_w + ix as usize] += src[y * ow + x];
                    }
                }
            }
        }
    }
}

/// Convolution of a batch; `w` is `out_c × patch_len` row-major.
/// Returns the output and (optionally) the unfolded inputs for backprop.
pub fn conv_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    b: &[f64],
    keep_cols: bool,
) -> (Vec<f64>, Vec<f64>) {
    let in_len = g.in_c * g.in_h * g.in_w;
    let npos = g.out_positions();
    let k = g.patch_len();
    let out_len = g.out_c * npos;
    let mut y = vec![0.0; n * out_len];
    let mut all_cols = if keep_cols { vec![0.0; n * k * npos] } else { Vec::new() };
    let mut scratch = vec![0.0; k * npos];
    for i in 0..n {
        let cols: &mut [f64] = if keep_cols {
            &mut all_cols[i * k * npos..(i + 1) * k * npos]
        } else {
            &mut scratch
        };
        im2col(&x[i * in_len..(i + 1) * in_len], g, cols);
        let yi = &mut y[i * out_len..(i + 1) * out_len];
        for (o, &bias) in b.iter().enumerate() {
            yi[o * npos..(o + 1) * npos].fill(bias);
        }
        gemm_acc(w, cols, yi, g.out_c, k, npos);
    }
    (y, all_cols)
}

pub fn conv_backward(
    cols: &[f64],
    dy: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let npos = g.out_positions();
    let k = g.patch_len();
    let out_len = g.out_c * npos;
    let in_len = g.in_c * g.in_h * g.in_w;
    let mut dx = if need_dx { vec![0.0; n * in_len] } else { Vec::new() };
    // wᵀ, patch_len × out_c
    let mut wt = vec![0.0; k * g.out_c];
    for o in 0..g.out_c {
        for p in 0..k {
            wt[p * g.out_c + o] = w[o * k + p];
        }
    }
    let mut dcols = vec![0.0; k * npos];
    for i in 0..n {
        let dyi = &dy[i * out_len..(i + 1) * out_len];
        let ci = &cols[i * k * npos..(i + 1) * k * npos];
        for o in 0..g.out_c {
            let dyo = &dyi[o * npos..(o + 1) * npos];
            db[o] += dyo.iter().sum::<f64>();
            let dwo = &mut dw[o * k..(o + 1) * k];
            for p in 0..k {
                let cp = &ci[p * npos..(p + 1) * npos];
                dwo[p] += cp.iter().zip(dyo).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if need_dx {
            dcols.fill(0.0);
            gemm_acc(&wt, dyi, &mut dcols, k, g.out_c, npos);
            col2im(&dcols, g, &mut dx[i * in_len..(i + 1) * in_len]);
        }
    }
    dx
}

/// 2×2 max pooling with stride 2 over `n × c` planes of size `h × w`.
/// Returns outputs and the flat input index of each selected maximum.
pub fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(dy: &[f64], arg: &[usize], in_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

/// Inference-mode batch normalization over `n × c × s` data.
pub fn batchnorm_eval(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let scale = gamma[ch] / (var[ch] + eps).sqrt();
        let shift = beta[ch] - mean[ch] * scale;
        for i in 0..n {
            let off = (i * c + ch) * s;
            for k in 0..s {
                y[off + k] = x[off + k] * scale + shift;
            }
        }
    }
    y
}

/// Cached quantities of a training-mode batch-norm forward.
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Training-mode batch normalization (batch statistics, biased variance).
pub fn batchnorm_train(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, BnCache) {
    let m = (n * s) as f64;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    let mut batch_mean = vec![0.0; c];
    let mut batch_var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for i in 0..n {
            let off = (i * c + ch) * s;
            sum += x[off..off + s].iter().sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0.0;
        for i in 0..n {
            let off = (i * c + ch) * s;
            sq += x[off..off + s].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        let var = sq / m;
        let is = 1.0 / (var + eps).sqrt();
        for i in 0..n {
            let off = (i * c + ch) * s;
            for k in 0..s {
                let h = (x[off + k] - mu) * is;
                xhat[off + k] = h;
                y[off + k] = gamma[ch] * h + beta[ch];
            }
        }
        inv_std[ch] = is;
        batch_mean[ch] = mu;
        batch_var[ch] = var;
    }
    (y, BnCache { xhat, inv_std, batch_mean, batch_var })
}

pub fn batchnorm_train_backward(
    dy: &[f64],
    cache: &BnCache,
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let m = (n * s) as f64;
    let mut dx = vec![0.0; dy.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..n {
            let off = (i * c + ch) * s;
            for k in 0..s {
                sum_dy += dy[off + k];
                sum_dy_xhat += dy[off + k] * cache.xhat[off + k];
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let coef = gamma[ch] * cache.inv_std[ch] / m;
        for i in 0..n {
            let off = (i * c + ch) * s;
            for k in 0..s {
                dx[off + k] =
                    coef * (m * dy[off + k] - sum_dy - cache.xhat[off + k] * sum_dy_xhat);
            }
        }
    }
    dx
}

/// Backward of an inference-mode (frozen) batch norm: only `dx`.
pub fn batchnorm_eval_backward(
    dy: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    for ch in 0..c {
        let scale = gamma[ch] / (var[ch] + eps).sqrt();
        for i in 0..n {
            let off = (i * c + ch) * s;
            for k in 0..s {
                dx[off + k] = dy[off + k] * scale;
            }
        }
    }
    dx
}

/// Row-wise softmax cross-entropy. Returns `(mean loss, dlogits)`.
pub fn softmax_cross_entropy(logits: &[f64], n: usize, classes: usize, labels: &[u16]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; n * classes];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits[i * classes..(i + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let lz = z.ln() + mx;
        let y = labels[i] as usize;
        loss += lz - row[y];
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (k, gv) in g.iter_mut().enumerate() {
            *gv = (row[k] - lz).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad)
}
