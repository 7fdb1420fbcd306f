//! Composable network blocks: patch embedding with class/distillation
//! tokens, multi-head self-attention, pre-norm transformer blocks and
//! densely connected convolutional blocks.
//!
//! Functions here operate on tape [`Var`]s; parameter owners (the model
//! builders) bind their tensors onto the tape and hand the resulting handles
//! in as `*Bound` structs.

use crate::error::{Error, Result};
use crate::tensor::{PoolKind, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;

/// Which learnable tokens are prepended to the patch sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSet {
    ClassOnly,
    ClassAndDistillation,
}

impl TokenSet {
    pub fn count(&self) -> usize {
        match self {
            TokenSet::ClassOnly => 1,
            TokenSet::ClassAndDistillation => 2,
        }
    }
}

/// Geometry of the patch embedding stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub token_set: TokenSet,
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        Ok(())
    }

    /// N = (H/P) * (W/P)
    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    /// T = N + |token set|
    pub fn seq_len(&self) -> usize {
        self.num_patches() + self.token_set.count()
    }

    /// Length of one flattened patch row, P*P*C.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Attention weights of one layer: shape [heads, T, T], rows sum to 1.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub weights: Tensor,
}

impl AttentionRecord {
    /// Stack detached per-head [T, T] attention values.
    pub fn from_heads(tape: &Tape, heads: &[Var]) -> Result<Self> {
        let t = tape.value(heads[0]).shape()[0];
        let mut data = Vec::with_capacity(heads.len() * t * t);
        for &h in heads {
            let v = tape.value(h);
            if v.shape() != [t, t] {
                return Err(Error::dim(
                    "attention_record",
                    format!("head shape {:?}, expected [{t}, {t}]", v.shape()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        Ok(AttentionRecord { weights: Tensor::new(vec![heads.len(), t, t], data)? })
    }

    pub fn num_heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Check nonnegativity and row normalization within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let t = self.seq_len();
        for (h, chunk) in self.weights.data().chunks(t * t).enumerate() {
            for (r, row) in chunk.chunks(t).enumerate() {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > tol || row.iter().any(|&v| v < 0.0) {
                    return Err(Error::Contract(format!(
                        "attention head {h} row {r} sums to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------- patchify

/// Cut an image into flattened patch rows (see [`Tape::patchify`]).
pub fn patchify(tape: &mut Tape, image: Var, patch: usize) -> Result<Var> {
    tape.patchify(image, patch)
}

/// Exact inverse of `patchify` on plain values.
pub fn unpatchify(patches: &Tensor, channels: usize, h: usize, w: usize, patch: usize) -> Result<Tensor> {
    let n = (h / patch) * (w / patch);
    let row_len = patch * patch * channels;
    if patches.shape() != [n, row_len] {
        return Err(Error::dim(
            "unpatchify",
            format!("patches shape {:?}, expected [{n}, {row_len}]", patches.shape()),
        ));
    }
    let mut data = vec![0.0; channels * h * w];
    for ni in 0..n {
        for j in 0..row_len {
            data[crate::tensor::patch_source_index(ni, j, channels, h, w, patch)] =
                patches.data()[ni * row_len + j];
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

// ------------------------------------------------------- patch embedding

/// Bound parameters of the embedding stage.
pub struct PatchEmbedBound {
    pub proj_w: Var,
    pub proj_b: Var,
    pub class_token: Var,
    pub dist_token: Option<Var>,
    pub pos: Var,
}

/// Project patch rows to the embedding dimension, prepend the class token
/// (and the distillation token when configured), then add the position
/// table. Row 0 is the class token, row 1 the distillation token.
pub fn embed_sequence(
    tape: &mut Tape,
    patches: Var,
    cfg: &PatchEmbedConfig,
    p: &PatchEmbedBound,
) -> Result<Var> {
    cfg.validate()?;
    let t_len = cfg.seq_len();
    if p.dist_token.is_some() != (cfg.token_set == TokenSet::ClassAndDistillation) {
        return Err(Error::Config(
            "distillation token presence does not match the configured token set".into(),
        ));
    }
    let pos_shape = tape.value(p.pos).shape().to_vec();
    if pos_shape != [t_len, cfg.embed_dim] {
        return Err(Error::Config(format!(
            "position table shape {pos_shape:?} does not match sequence {t_len}x{}",
            cfg.embed_dim
        )));
    }
    let projected = tape.matmul(patches, p.proj_w)?;
    let projected = tape.add_row(projected, p.proj_b)?;
    let mut parts = vec![p.class_token];
    if let Some(d) = p.dist_token {
        parts.push(d);
    }
    parts.push(projected);
    let seq = tape.concat_rows(&parts)?;
    tape.add(seq, p.pos)
}

// ------------------------------------------------------------- attention

/// Bound parameters of one attention sublayer.
pub struct AttentionBound {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head scaled dot-product self-attention over a [T, D] sequence.
/// Returns the projected output and the per-head attention weights.
pub fn mhsa(
    tape: &mut Tape,
    x: Var,
    heads: usize,
    p: &AttentionBound,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(x).shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "embed dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(x, p.wq)?;
    let q = tape.add_row(q, p.bq)?;
    let k = tape.matmul(x, p.wk)?;
    let k = tape.add_row(k, p.bk)?;
    let v = tape.matmul(x, p.wv)?;
    let v = tape.add_row(v, p.bv)?;

    let mut outs = Vec::with_capacity(heads);
    let mut atts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let att = tape.softmax(scores, 1)?;
        atts.push(att);
        outs.push(tape.matmul(att, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let out = tape.matmul(cat, p.wo)?;
    let out = tape.add_row(out, p.bo)?;
    Ok((out, atts))
}

// ------------------------------------------------------ transformer block

/// Bound parameters of one encoder block.
pub struct TransformerBlockBound {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub attn: AttentionBound,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Pre-norm residual block: x + MHSA(LN(x)), then x + MLP(LN(x)).
/// The MLP is D -> hidden -> D with GELU.
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    heads: usize,
    p: &TransformerBlockBound,
) -> Result<(Var, Vec<Var>)> {
    let normed = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta, LN_EPS)?;
    let (attn_out, atts) = mhsa(tape, normed, heads, &p.attn)?;
    let x = tape.add(x, attn_out)?;

    let normed = tape.layer_norm(x, p.ln2_gamma, p.ln2_beta, LN_EPS)?;
    let h1 = tape.matmul(normed, p.fc1_w)?;
    let h1 = tape.add_row(h1, p.fc1_b)?;
    let h1 = tape.gelu(h1);
    let h2 = tape.matmul(h1, p.fc2_w)?;
    let h2 = tape.add_row(h2, p.fc2_b)?;
    let x = tape.add(x, h2)?;
    Ok((x, atts))
}

// ------------------------------------------------------------ dense block

/// Bound batch-norm parameters plus their (constant) running statistics.
pub struct BnBound {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Apply batch norm in train (batch statistics) or eval (running statistics)
/// mode. The returned Var carries saved batch stats in train mode.
pub fn batch_norm(tape: &mut Tape, x: Var, bn: &BnBound, train: bool) -> Result<Var> {
    if train {
        tape.batch_norm_train(x, bn.gamma, bn.beta, BN_EPS)
    } else {
        tape.batch_norm_eval(x, bn.gamma, bn.beta, &bn.running_mean, &bn.running_var, BN_EPS)
    }
}

/// Bound parameters of one dense layer:
/// BN -> ReLU -> 1x1 conv -> BN -> ReLU -> 3x3 conv.
pub struct DenseLayerBound {
    pub bn1: BnBound,
    pub conv1_w: Var,
    pub bn2: BnBound,
    pub conv2_w: Var,
}

/// Densely connected block: every layer consumes the concatenation of all
/// previous feature maps and appends `growth` new channels. Returns the
/// concatenated output and the train-mode BN node handles in order.
pub fn dense_block(
    tape: &mut Tape,
    x: Var,
    layers: &[DenseLayerBound],
    train: bool,
) -> Result<(Var, Vec<Var>)> {
    let mut acc = x;
    let mut bn_nodes = Vec::new();
    for layer in layers {
        let b1 = batch_norm(tape, acc, &layer.bn1, train)?;
        bn_nodes.push(b1);
        let r1 = tape.relu(b1);
        let c1 = tape.conv2d(r1, layer.conv1_w, 1, 0)?;
        let b2 = batch_norm(tape, c1, &layer.bn2, train)?;
        bn_nodes.push(b2);
        let r2 = tape.relu(b2);
        let c2 = tape.conv2d(r2, layer.conv2_w, 1, 1)?;
        acc = tape.concat_channels(acc, c2)?;
    }
    Ok((acc, bn_nodes))
}

/// Global average pooling convenience used by the CNN heads.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.pool(x, PoolKind::GlobalAvg, 0, 1, 0)
}
