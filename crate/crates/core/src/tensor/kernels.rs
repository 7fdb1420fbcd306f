//! Raw array math backing the tape operations.
//!
//! Everything here is a pure function over row-major `&[f64]` buffers; shape
//! checking lives in the tape builders. Backward kernels accumulate with `+=`
//! so repeated use of a value sums gradients.

/// out[m x n] += ? No: plain C = A(m x k) * B(k x n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Accumulating variant: acc += A * B.
pub fn matmul_acc(acc: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut acc[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

// ---------------------------------------------------------------- softmax

/// Softmax along `axis` of a tensor with the given shape, max-subtracted.
pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..axis_len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..axis_len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..axis_len {
                out[base + j * inner] /= sum;
            }
        }
    }
    out
}

/// dX += (g - <g, y>_axis) .* y per slice along axis.
pub fn softmax_backward(
    dx: &mut [f64],
    y: &[f64],
    g: &[f64],
    shape: &[usize],
    axis: usize,
) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = 0.0;
            for j in 0..axis_len {
                let idx = base + j * inner;
                dot += g[idx] * y[idx];
            }
            for j in 0..axis_len {
                let idx = base + j * inner;
                dx[idx] += (g[idx] - dot) * y[idx];
            }
        }
    }
}

// ------------------------------------------------------------- layer norm

/// Per-row layer norm over the last dimension of size `d`.
/// Returns (y, mean, inv_std), one mean/inv_std per row.
pub fn layer_norm_forward(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; rows];
    let mut inv_stds = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        means[r] = mean;
        inv_stds[r] = inv_std;
        for j in 0..d {
            y[r * d + j] = (row[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
    (y, means, inv_stds)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    x: &[f64],
    g: &[f64],
    d: usize,
    gamma: &[f64],
    means: &[f64],
    inv_stds: &[f64],
) {
    let rows = x.len() / d;
    for r in 0..rows {
        let base = r * d;
        let mean = means[r];
        let inv_std = inv_stds[r];
        let mut sum_gg = 0.0;
        let mut sum_gg_xhat = 0.0;
        for j in 0..d {
            let xhat = (x[base + j] - mean) * inv_std;
            let gg = g[base + j] * gamma[j];
            sum_gg += gg;
            sum_gg_xhat += gg * xhat;
            dgamma[j] += g[base + j] * xhat;
            dbeta[j] += g[base + j];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let xhat = (x[base + j] - mean) * inv_std;
            let gg = g[base + j] * gamma[j];
            dx[base + j] += inv_std * (gg - inv_d * sum_gg - xhat * inv_d * sum_gg_xhat);
        }
    }
}

// ------------------------------------------------------------ batch norm

/// Batch-statistics normalization over (B, H, W) per channel for a
/// [B, C, H, W] tensor. Returns (y, mean, biased variance, inv_std).
pub fn batch_norm_train_forward(
    x: &[f64],
    b: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (b * hw) as f64;
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    let mut inv_stds = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for &v in &x[base..base + hw] {
                sum += v;
                sum_sq += v * v;
            }
        }
        let mean = sum / m;
        let var = (sum_sq / m - mean * mean).max(0.0);
        let inv_std = 1.0 / (var + eps).sqrt();
        means[ch] = mean;
        vars[ch] = var;
        inv_stds[ch] = inv_std;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in 0..hw {
                y[base + i] = (x[base + i] - mean) * inv_std * gamma[ch] + beta[ch];
            }
        }
    }
    (y, means, vars, inv_stds)
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_train_backward(
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    x: &[f64],
    g: &[f64],
    b: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    means: &[f64],
    inv_stds: &[f64],
) {
    let m = (b * hw) as f64;
    for ch in 0..c {
        let mean = means[ch];
        let inv_std = inv_stds[ch];
        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in 0..hw {
                let xhat = (x[base + i] - mean) * inv_std;
                sum_g += g[base + i];
                sum_g_xhat += g[base + i] * xhat;
            }
        }
        dgamma[ch] += sum_g_xhat;
        dbeta[ch] += sum_g;
        let scale = gamma[ch] * inv_std;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in 0..hw {
                let xhat = (x[base + i] - mean) * inv_std;
                dx[base + i] +=
                    scale * (g[base + i] - sum_g / m - xhat * (sum_g_xhat / m));
            }
        }
    }
}

// ---------------------------------------------------------------- conv2d

pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Cross-correlation of x [B,C,H,W] with w [F,C,k,k]; zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(wd, k, stride, pad);
    let mut out = vec![0.0; b * f * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let x_ch = &x[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                        let w_ch = &w[((fi * c + ci) * k * k)..((fi * c + ci + 1) * k * k)];
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_ch[iy as usize * wd..(iy as usize + 1) * wd];
                            let w_row = &w_ch[ky * k..(ky + 1) * k];
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x_row[ix as usize] * w_row[kx];
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    dx: &mut [f64],
    dw: &mut [f64],
    x: &[f64],
    w: &[f64],
    g: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(wd, k, stride, pad);
    for bi in 0..b {
        for fi in 0..f {
            let g_map = &g[((bi * f + fi) * oh * ow)..((bi * f + fi + 1) * oh * ow)];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g_map[oy * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        let x_base = (bi * c + ci) * h * wd;
                        let w_base = (fi * c + ci) * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = x_base + iy as usize * wd + ix as usize;
                                let wi = w_base + ky * k + kx;
                                if need_dw {
                                    dw[wi] += gv * x[xi];
                                }
                                if need_dx {
                                    dx[xi] += gv * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------- pooling

/// Max pool; padded cells count as -inf. Returns (out, argmax flat index).
#[allow(clippy::too_many_arguments)]
pub fn max_pool_forward(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut out = vec![0.0; b * c * oh * ow];
    let mut arg = vec![0usize; b * c * oh * ow];
    for bc in 0..b * c {
        let x_map = &x[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if x_map[idx] > best {
                            best = x_map[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[(bc * oh + oy) * ow + ox] = best;
                arg[(bc * oh + oy) * ow + ox] = bc * h * w + best_idx;
            }
        }
    }
    (out, arg)
}

/// Average pool with zero padding counted in the k*k denominator.
#[allow(clippy::too_many_arguments)]
pub fn avg_pool_forward(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let denom = (k * k) as f64;
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let x_map = &x[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += x_map[iy as usize * w + ix as usize];
                    }
                }
                out[(bc * oh + oy) * ow + ox] = acc / denom;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool_backward(
    dx: &mut [f64],
    g: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let denom = (k * k) as f64;
    for bc in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(bc * oh + oy) * ow + ox] / denom;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[bc * h * w + iy as usize * w + ix as usize] += gv;
                    }
                }
            }
        }
    }
}

// ------------------------------------------------------------- bilinear

/// Bilinear resampling of a single-channel h x w map to oh x ow.
/// Pixel centers follow the half-pixel convention (align_corners = false),
/// so a same-size resize is the identity.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

// -------------------------------------------------------------- patchify

/// Data offset of patch-row element (n, j) of a [C, H, W] image cut into
/// P x P patches: patches walk the grid row-major, within a patch pixels are
/// row-major with channels innermost.
pub fn patch_source_index(
    n: usize,
    j: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> usize {
    let grid_w = w / p;
    let (py, px) = (n / grid_w, n % grid_w);
    let pix = j / c;
    let ch = j % c;
    let (dy, dx) = (pix / p, pix % p);
    let (y, x) = (py * p + dy, px * p + dx);
    ch * h * w + y * w + x
}
