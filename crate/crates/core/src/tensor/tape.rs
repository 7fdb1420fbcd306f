//! Operation tape for reverse-mode differentiation.
//!
//! Forward ops run eagerly and append one node each; the node list is
//! topologically ordered by construction, so [`Tape::backward`] walks it once
//! in reverse, accumulating gradients additively into every node that needs
//! one. A tape is single-owner: record and backward happen on one thread.

use super::kernels as k;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

const PROB_CLAMP: f64 = 1e-7;

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<f64>, inv_stds: Vec<f64> },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize, stride: usize, pad: usize },
    GlobalAvgPool { x: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, means: Vec<f64>, vars: Vec<f64>, inv_stds: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, means: Vec<f64>, inv_stds: Vec<f64> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    ConcatChannels { a: Var, b: Var },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Patchify { x: Var, p: usize },
    Reshape { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    WeightedBce { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    BernoulliKl { student: Var, teacher_probs: Vec<f64>, tau: f64 },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Gradient participation follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Record a constant input (never differentiated).
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Gradient of a node, populated by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Detached copy of a node's value.
    pub fn detach(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].tensor.clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }

    /// Batch statistics (mean, biased variance) saved by a train-mode batch
    /// norm node, for running-average updates.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNormTrain { means, vars, .. } => Some((means, vars)),
            _ => None,
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { tensor, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    // ------------------------------------------------------------ builders

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("left shape {:?}, right shape {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    /// Broadcast-add a [C] bias over the last dimension.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::dim(
                "add_row",
                format!("input shape {:?}, bias shape {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("left shape {:?}, right shape {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.nodes[x.0].tensor.map(|v| v * factor);
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, factor }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("left shape {sa:?}, right shape {sb:?}"),
            ));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let data = k::matmul(self.data(a), self.data(b), m, kk, n);
        let t = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul { a, b }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let t = Tensor::new(vec![c, r], k::transpose(self.data(x), r, c))?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Transpose { x }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].tensor.map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(t, Op::Relu { x }, needs)
    }

    /// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].tensor.map(gelu_scalar);
        let needs = self.needs(x);
        self.push(t, Op::Gelu { x }, needs)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for shape {s:?}"),
            ));
        }
        let data = k::softmax_axis(self.data(x), s, axis);
        let t = Tensor::new(s.to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax { x, axis }, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input shape {:?}, gamma shape {:?}, beta shape {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (y, means, inv_stds) =
            k::layer_norm_forward(self.data(x), d, self.data(gamma), self.data(beta), eps);
        let t = Tensor::new(self.shape(x).to_vec(), y)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, means, inv_stds }, needs))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be >= 1".to_string()));
        }
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::dim(
                "conv2d",
                format!("input shape {sx:?}, kernel shape {sw:?}"),
            ));
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kk) = (sw[0], sw[2]);
        if kk > h + 2 * pad || kk > wd + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kk}x{kk} larger than padded input {sx:?} with pad {pad}"),
            ));
        }
        let data = k::conv2d_forward(self.data(x), self.data(w), b, c, h, wd, f, kk, stride, pad);
        let oh = k::conv_out_len(h, kk, stride, pad);
        let ow = k::conv_out_len(wd, kk, stride, pad);
        let t = Tensor::new(vec![b, f, oh, ow], data)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, needs))
    }

    pub fn pool(
        &mut self,
        x: Var,
        kind: PoolKind,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dim("pool", format!("expected rank 4, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let needs = self.needs(x);
        match kind {
            PoolKind::GlobalAvg => {
                let mut data = vec![0.0; b * c];
                for bc in 0..b * c {
                    data[bc] =
                        self.data(x)[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>()
                            / (h * w) as f64;
                }
                let t = Tensor::new(vec![b, c, 1, 1], data)?;
                Ok(self.push(t, Op::GlobalAvgPool { x }, needs))
            }
            PoolKind::Max | PoolKind::Avg => {
                if stride == 0 {
                    return Err(Error::dim("pool", "stride must be >= 1".to_string()));
                }
                if kernel > h + 2 * pad || kernel > w + 2 * pad {
                    return Err(Error::dim(
                        "pool",
                        format!("kernel {kernel} larger than padded input {s:?} with pad {pad}"),
                    ));
                }
                let oh = k::conv_out_len(h, kernel, stride, pad);
                let ow = k::conv_out_len(w, kernel, stride, pad);
                match kind {
                    PoolKind::Max => {
                        let (data, argmax) =
                            k::max_pool_forward(self.data(x), b, c, h, w, kernel, stride, pad);
                        let t = Tensor::new(vec![b, c, oh, ow], data)?;
                        Ok(self.push(t, Op::MaxPool { x, argmax }, needs))
                    }
                    PoolKind::Avg => {
                        let data =
                            k::avg_pool_forward(self.data(x), b, c, h, w, kernel, stride, pad);
                        let t = Tensor::new(vec![b, c, oh, ow], data)?;
                        Ok(self.push(t, Op::AvgPool { x, k: kernel, stride, pad }, needs))
                    }
                    PoolKind::GlobalAvg => unreachable!(),
                }
            }
        }
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dim("batch_norm", format!("expected rank 4, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!("channels {c}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (y, means, vars, inv_stds) = k::batch_norm_train_forward(
            self.data(x),
            b,
            c,
            h * w,
            self.data(gamma),
            self.data(beta),
            eps,
        );
        let t = Tensor::new(s.to_vec(), y)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::BatchNormTrain { x, gamma, beta, means, vars, inv_stds }, needs))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dim("batch_norm", format!("expected rank 4, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if running_mean.len() != c || running_var.len() != c || self.shape(gamma) != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!("channels {c} vs running stats {}/{}", running_mean.len(), running_var.len()),
            ));
        }
        let inv_stds: Vec<f64> =
            running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let hw = h * w;
        let mut y = vec![0.0; self.data(x).len()];
        let (gm, bt) = (self.data(gamma).to_vec(), self.data(beta).to_vec());
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in 0..hw {
                    y[base + i] =
                        (self.data(x)[base + i] - running_mean[ch]) * inv_stds[ch] * gm[ch]
                            + bt[ch];
                }
            }
        }
        let t = Tensor::new(s.to_vec(), y)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::BatchNormEval { x, gamma, beta, means: running_mean.to_vec(), inv_stds },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("incompatible part shape {s:?}, expected [_, {cols}]"),
                ));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("incompatible part shape {s:?}, expected [{rows}, _]"),
                ));
            }
            cols += s[1];
        }
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let pc = self.shape(p)[1];
            for r in 0..rows {
                data[r * cols + off..r * cols + off + pc]
                    .copy_from_slice(&self.data(p)[r * pc..(r + 1) * pc]);
            }
            off += pc;
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }, needs))
    }

    /// Concatenate two [B, C, H, W] tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::dim(
                "concat_channels",
                format!("left shape {sa:?}, right shape {sb:?}"),
            ));
        }
        let (bs, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut data = Vec::with_capacity(bs * (ca + cb) * hw);
        for bi in 0..bs {
            data.extend_from_slice(&self.data(a)[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&self.data(b)[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let t = Tensor::new(vec![bs, ca + cb, sa[2], sa[3]], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::ConcatChannels { a, b }, needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of shape {s:?}", start + len),
            ));
        }
        let cols = s[1];
        let data = self.data(x)[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::new(vec![len, cols], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SliceRows { x, start }, needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} of shape {s:?}", start + len),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.data(x)[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SliceCols { x, start }, needs))
    }

    /// Cut a [C, H, W] image into non-overlapping P x P patches, flattened to
    /// rows of length P*P*C; patches run row-major over the grid.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dim("patchify", format!("expected rank 3, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::dim(
                "patchify",
                format!("image {h}x{w} not divisible by patch size {p}"),
            ));
        }
        let n = (h / p) * (w / p);
        let row_len = p * p * c;
        let mut data = vec![0.0; n * row_len];
        for ni in 0..n {
            for j in 0..row_len {
                data[ni * row_len + j] = self.data(x)[k::patch_source_index(ni, j, c, h, w, p)];
            }
        }
        let t = Tensor::new(vec![n, row_len], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Patchify { x, p }, needs))
    }

    /// Same data, new shape; element counts must agree.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].tensor.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} to {shape:?}", self.shape(x)),
            ));
        }
        let t = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.data(x).iter().sum());
        let needs = self.needs(x);
        self.push(t, Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let t = Tensor::scalar(self.data(x).iter().sum::<f64>() / n);
        let needs = self.needs(x);
        self.push(t, Op::MeanAll { x }, needs)
    }

    /// Mean over batch and classes of w_k * BCE-with-logits, in the stable
    /// max(z,0) - z t + ln(1 + exp(-|z|)) form.
    pub fn weighted_bce(&mut self, logits: Var, targets: &Tensor, weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || targets.shape() != s {
            return Err(Error::dim(
                "weighted_bce",
                format!("logits shape {s:?}, targets shape {:?}", targets.shape()),
            ));
        }
        let kcls = s[1];
        if weights.len() != kcls {
            return Err(Error::dim(
                "weighted_bce",
                format!("{kcls} classes, {} weights", weights.len()),
            ));
        }
        if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Contract("weighted_bce targets must be 0 or 1".into()));
        }
        let n = self.data(logits).len() as f64;
        let mut acc = 0.0;
        for (i, (&z, &t)) in self.data(logits).iter().zip(targets.data()).enumerate() {
            let w = weights[i % kcls];
            acc += w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
        }
        let t = Tensor::scalar(acc / n);
        let needs = self.needs(logits);
        Ok(self.push(
            t,
            Op::WeightedBce { logits, targets: targets.data().to_vec(), weights: weights.to_vec() },
            needs,
        ))
    }

    /// Mean per-label Bernoulli KL(p_teacher || q_student) at temperature tau,
    /// scaled by tau^2. The teacher side is a constant: gradients flow only
    /// into the student logits.
    pub fn bernoulli_kl(&mut self, student: Var, teacher_probs: &Tensor, tau: f64) -> Result<Var> {
        let s = self.shape(student);
        if teacher_probs.shape() != s {
            return Err(Error::dim(
                "bernoulli_kl",
                format!("student shape {s:?}, teacher shape {:?}", teacher_probs.shape()),
            ));
        }
        if tau <= 0.0 {
            return Err(Error::Contract(format!("temperature must be > 0, got {tau}")));
        }
        let n = self.data(student).len() as f64;
        let mut acc = 0.0;
        for (&z, &p_raw) in self.data(student).iter().zip(teacher_probs.data()) {
            let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let q = super::sigmoid(z / tau).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            acc += p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
        }
        let t = Tensor::scalar(tau * tau * acc / n);
        let needs = self.needs(student);
        Ok(self.push(
            t,
            Op::BernoulliKl { student, teacher_probs: teacher_probs.data().to_vec(), tau },
            needs,
        ))
    }

    // ------------------------------------------------------------ backward

    /// Populate gradients of every node reachable from `loss`, which must be
    /// scalar. Nodes are visited in reverse topological (creation) order
    /// exactly once; fan-out accumulates additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].tensor.grad = Some(g);
        }
        Ok(())
    }

    /// Clear all recorded gradients (tape values are kept).
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let numel = self.nodes[v.0].tensor.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &v in &[*a, *b] {
                    if let Some(buf) = self.buf(grads, v) {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(buf) = self.buf(grads, *x) {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                let c = self.nodes[bias.0].tensor.numel();
                if let Some(buf) = self.buf(grads, *bias) {
                    for (j, &gv) in g.iter().enumerate() {
                        buf[j % c] += gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(buf) = self.buf(grads, *a) {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(&db) {
                        *o += gv * bv;
                    }
                }
                if let Some(buf) = self.buf(grads, *b) {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(&da) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                if let Some(buf) = self.buf(grads, *x) {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * f;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, kk, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let bt = k::transpose(self.data(*b), kk, n);
                    let buf = self.buf(grads, *a).unwrap();
                    k::matmul_acc(buf, g, &bt, m, n, kk);
                }
                if self.needs(*b) {
                    let at = k::transpose(self.data(*a), m, kk);
                    let buf = self.buf(grads, *b).unwrap();
                    k::matmul_acc(buf, &at, g, kk, m, n);
                }
            }
            Op::Transpose { x } => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(buf) = self.buf(grads, *x) {
                    for rr in 0..r {
                        for cc in 0..c {
                            buf[rr * c + cc] += g[cc * r + rr];
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xs = self.data(*x).to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(&xs) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xs = self.data(*x).to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(&xs) {
                        *o += gv * gelu_grad_scalar(xv);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].tensor.data().to_vec();
                let shape = self.nodes[i].tensor.shape().to_vec();
                let axis = *axis;
                if let Some(buf) = self.buf(grads, *x) {
                    k::softmax_backward(buf, &y, g, &shape, axis);
                }
            }
            Op::LayerNorm { x, gamma, beta, means, inv_stds } => {
                let d = *self.shape(*x).last().unwrap();
                let numel = self.nodes[x.0].tensor.numel();
                let (need_x, need_g, need_b) =
                    (self.needs(*x), self.needs(*gamma), self.needs(*beta));
                let mut dx_full = vec![0.0; numel];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                k::layer_norm_backward(
                    &mut dx_full,
                    &mut dgamma,
                    &mut dbeta,
                    self.data(*x),
                    g,
                    d,
                    self.data(*gamma),
                    means,
                    inv_stds,
                );
                if need_x {
                    let buf = self.buf(grads, *x).unwrap();
                    for (o, v) in buf.iter_mut().zip(&dx_full) {
                        *o += v;
                    }
                }
                if need_g {
                    let buf = self.buf(grads, *gamma).unwrap();
                    for (o, v) in buf.iter_mut().zip(&dgamma) {
                        *o += v;
                    }
                }
                if need_b {
                    let buf = self.buf(grads, *beta).unwrap();
                    for (o, v) in buf.iter_mut().zip(&dbeta) {
                        *o += v;
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (f, kk) = (sw[0], sw[2]);
                let (need_x, need_w) = (self.needs(*x), self.needs(*w));
                let mut dx_full = vec![0.0; b * c * h * wd];
                let mut dw_full = vec![0.0; f * c * kk * kk];
                k::conv2d_backward(
                    &mut dx_full,
                    &mut dw_full,
                    self.data(*x),
                    self.data(*w),
                    g,
                    b,
                    c,
                    h,
                    wd,
                    f,
                    kk,
                    *stride,
                    *pad,
                    need_x,
                    need_w,
                );
                if need_x {
                    let buf = self.buf(grads, *x).unwrap();
                    for (o, v) in buf.iter_mut().zip(&dx_full) {
                        *o += v;
                    }
                }
                if need_w {
                    let buf = self.buf(grads, *w).unwrap();
                    for (o, v) in buf.iter_mut().zip(&dw_full) {
                        *o += v;
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(buf) = self.buf(grads, *x) {
                    for (j, &gv) in g.iter().enumerate() {
                        buf[argmax[j]] += gv;
                    }
                }
            }
            Op::AvgPool { x, k: kernel, stride, pad } => {
                let s = self.shape(*x);
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (kernel, stride, pad) = (*kernel, *stride, *pad);
                if let Some(buf) = self.buf(grads, *x) {
                    k::avg_pool_backward(buf, g, b, c, h, w, kernel, stride, pad);
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                if let Some(buf) = self.buf(grads, *x) {
                    for (bc, &gv) in g.iter().enumerate() {
                        let share = gv / hw as f64;
                        for o in &mut buf[bc * hw..(bc + 1) * hw] {
                            *o += share;
                        }
                    }
                }
            }
            Op::BatchNormTrain { x, gamma, beta, means, inv_stds, .. } => {
                let s = self.shape(*x);
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let numel = self.nodes[x.0].tensor.numel();
                let need_x = self.needs(*x);
                let mut dx_full = vec![0.0; numel];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                k::batch_norm_train_backward(
                    &mut dx_full,
                    &mut dgamma,
                    &mut dbeta,
                    self.data(*x),
                    g,
                    b,
                    c,
                    hw,
                    self.data(*gamma),
                    means,
                    inv_stds,
                );
                if need_x {
                    let buf = self.buf(grads, *x).unwrap();
                    for (o, v) in buf.iter_mut().zip(&dx_full) {
                        *o += v;
                    }
                }
                if self.needs(*gamma) {
                    let buf = self.buf(grads, *gamma).unwrap();
                    for (o, v) in buf.iter_mut().zip(&dgamma) {
                        *o += v;
                    }
                }
                if self.needs(*beta) {
                    let buf = self.buf(grads, *beta).unwrap();
                    for (o, v) in buf.iter_mut().zip(&dbeta) {
                        *o += v;
                    }
                }
            }
            Op::BatchNormEval { x, gamma, beta, means, inv_stds } => {
                let s = self.shape(*x);
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let xs = self.data(*x);
                let gm = self.data(*gamma).to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for ii in 0..hw {
                            let gv = g[base + ii];
                            dgamma[ch] += gv * (xs[base + ii] - means[ch]) * inv_stds[ch];
                            dbeta[ch] += gv;
                        }
                    }
                }
                if let Some(buf) = self.buf(grads, *x) {
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            let scale = gm[ch] * inv_stds[ch];
                            for ii in 0..hw {
                                buf[base + ii] += g[base + ii] * scale;
                            }
                        }
                    }
                }
                if self.needs(*gamma) {
                    let buf = self.buf(grads, *gamma).unwrap();
                    for (o, v) in buf.iter_mut().zip(&dgamma) {
                        *o += v;
                    }
                }
                if self.needs(*beta) {
                    let buf = self.buf(grads, *beta).unwrap();
                    for (o, v) in buf.iter_mut().zip(&dbeta) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].tensor.numel();
                    if let Some(buf) = self.buf(grads, p) {
                        for (o, &gv) in buf.iter_mut().zip(&g[off..off + n]) {
                            *o += gv;
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let rows = self.shape(parts[0])[0];
                let total_cols = self.nodes[i].tensor.shape()[1];
                let mut off = 0;
                for p in parts {
                    let pc = self.shape(p)[1];
                    if let Some(buf) = self.buf(grads, p) {
                        for r in 0..rows {
                            for cc in 0..pc {
                                buf[r * pc + cc] += g[r * total_cols + off + cc];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatChannels { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bs, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let ctot = ca + cb;
                if let Some(buf) = self.buf(grads, *a) {
                    for bi in 0..bs {
                        for (o, &gv) in buf[bi * ca * hw..(bi + 1) * ca * hw]
                            .iter_mut()
                            .zip(&g[bi * ctot * hw..bi * ctot * hw + ca * hw])
                        {
                            *o += gv;
                        }
                    }
                }
                if let Some(buf) = self.buf(grads, *b) {
                    for bi in 0..bs {
                        for (o, &gv) in buf[bi * cb * hw..(bi + 1) * cb * hw]
                            .iter_mut()
                            .zip(&g[bi * ctot * hw + ca * hw..(bi + 1) * ctot * hw])
                        {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.shape(*x)[1];
                let start = *start;
                if let Some(buf) = self.buf(grads, *x) {
                    for (j, &gv) in g.iter().enumerate() {
                        buf[start * cols + j] += gv;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let out_cols = self.nodes[i].tensor.shape()[1];
                let start = *start;
                if let Some(buf) = self.buf(grads, *x) {
                    for (j, &gv) in g.iter().enumerate() {
                        let (r, cc) = (j / out_cols, j % out_cols);
                        buf[r * cols + start + cc] += gv;
                    }
                }
            }
            Op::Patchify { x, p } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let row_len = p * p * c;
                let p = *p;
                if let Some(buf) = self.buf(grads, *x) {
                    for (j, &gv) in g.iter().enumerate() {
                        let (n, jj) = (j / row_len, j % row_len);
                        buf[k::patch_source_index(n, jj, c, h, w, p)] += gv;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(buf) = self.buf(grads, *x) {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::SumAll { x } => {
                let gv = g[0];
                if let Some(buf) = self.buf(grads, *x) {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].tensor.numel() as f64;
                let gv = g[0] / n;
                if let Some(buf) = self.buf(grads, *x) {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::WeightedBce { logits, targets, weights } => {
                let zs = self.data(*logits).to_vec();
                let kcls = weights.len();
                let n = zs.len() as f64;
                let weights = weights.clone();
                let targets = targets.clone();
                let gv = g[0];
                if let Some(buf) = self.buf(grads, *logits) {
                    for (j, (&z, &t)) in zs.iter().zip(&targets).enumerate() {
                        buf[j] += gv * weights[j % kcls] * (super::sigmoid(z) - t) / n;
                    }
                }
            }
            Op::BernoulliKl { student, teacher_probs, tau } => {
                let zs = self.data(*student).to_vec();
                let n = zs.len() as f64;
                let tau = *tau;
                let teacher = teacher_probs.clone();
                let gv = g[0];
                if let Some(buf) = self.buf(grads, *student) {
                    for (j, (&z, &p_raw)) in zs.iter().zip(&teacher).enumerate() {
                        let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                        let q = super::sigmoid(z / tau);
                        buf[j] += gv * tau * (q - p) / n;
                    }
                }
            }
        }
    }
}
