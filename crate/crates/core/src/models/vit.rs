//! Vision transformer (and its distillation-token variant).

use super::{Family, ForwardOptions, ModelSpec, Traced};
use crate::error::Result;
use crate::nn::{
    self, AttentionBound, PatchEmbedBound, TransformerBlockBound, LN_EPS,
};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

const INIT_SIGMA: f64 = 0.02;

#[derive(Clone)]
pub struct VitBlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

#[derive(Clone)]
pub struct VitModel {
    pub spec: ModelSpec,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub class_token: Tensor,
    pub dist_token: Option<Tensor>,
    pub pos: Tensor,
    pub blocks: Vec<VitBlockParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub dist_head_w: Option<Tensor>,
    pub dist_head_b: Option<Tensor>,
}

/// Ordered trainable parameter shapes for a transformer spec; the single
/// source of truth for counting and for checkpoint layout.
pub fn param_shapes(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let d = spec.embed_dim;
    let cfg = spec.patch_embed_config();
    let (t_len, pdim) = (cfg.seq_len(), cfg.patch_dim());
    let hidden = spec.mlp_ratio * d;
    let k = spec.num_classes;
    let distilled = spec.family == Family::Deit;

    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("embed.proj_w".into(), vec![pdim, d]),
        ("embed.proj_b".into(), vec![d]),
        ("embed.class_token".into(), vec![1, d]),
    ];
    if distilled {
        out.push(("embed.dist_token".into(), vec![1, d]));
    }
    out.push(("embed.pos".into(), vec![t_len, d]));
    for i in 0..spec.depth {
        let p = |field: &str| format!("blocks.{i}.{field}");
        out.extend([
            (p("ln1.gamma"), vec![d]),
            (p("ln1.beta"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.gamma"), vec![d]),
            (p("ln2.beta"), vec![d]),
            (p("mlp.fc1_w"), vec![d, hidden]),
            (p("mlp.fc1_b"), vec![hidden]),
            (p("mlp.fc2_w"), vec![hidden, d]),
            (p("mlp.fc2_b"), vec![d]),
        ]);
    }
    out.push(("norm.gamma".into(), vec![d]));
    out.push(("norm.beta".into(), vec![d]));
    out.push(("head.w".into(), vec![d, k]));
    out.push(("head.b".into(), vec![k]));
    if distilled {
        out.push(("dist_head.w".into(), vec![d, k]));
        out.push(("dist_head.b".into(), vec![k]));
    }
    out
}

fn trunc_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.trunc_normal(INIT_SIGMA)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl VitModel {
    /// Truncated-normal weights and tokens, zero biases, identity layer norm.
    pub fn build(spec: ModelSpec, seed: u64) -> VitModel {
        let mut rng = Rng::derive(seed, &[0x5649_5421]);
        let d = spec.embed_dim;
        let cfg = spec.patch_embed_config();
        let hidden = spec.mlp_ratio * d;
        let k = spec.num_classes;
        let distilled = spec.family == Family::Deit;

        let proj_w = trunc_normal(&mut rng, &[cfg.patch_dim(), d]);
        let proj_b = Tensor::zeros(&[d]);
        let class_token = trunc_normal(&mut rng, &[1, d]);
        let dist_token = distilled.then(|| trunc_normal(&mut rng, &[1, d]));
        let pos = trunc_normal(&mut rng, &[cfg.seq_len(), d]);
        let blocks = (0..spec.depth)
            .map(|_| VitBlockParams {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                wq: trunc_normal(&mut rng, &[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: trunc_normal(&mut rng, &[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: trunc_normal(&mut rng, &[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: trunc_normal(&mut rng, &[d, d]),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                fc1_w: trunc_normal(&mut rng, &[d, hidden]),
                fc1_b: Tensor::zeros(&[hidden]),
                fc2_w: trunc_normal(&mut rng, &[hidden, d]),
                fc2_b: Tensor::zeros(&[d]),
            })
            .collect();
        VitModel {
            proj_w,
            proj_b,
            class_token,
            dist_token,
            pos,
            blocks,
            norm_gamma: Tensor::ones(&[d]),
            norm_beta: Tensor::zeros(&[d]),
            head_w: trunc_normal(&mut rng, &[d, k]),
            head_b: Tensor::zeros(&[k]),
            dist_head_w: distilled.then(|| trunc_normal(&mut rng, &[d, k])),
            dist_head_b: distilled.then(|| Tensor::zeros(&[k])),
            spec,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.proj_w".into(), &self.proj_w),
            ("embed.proj_b".into(), &self.proj_b),
            ("embed.class_token".into(), &self.class_token),
        ];
        if let Some(t) = &self.dist_token {
            out.push(("embed.dist_token".into(), t));
        }
        out.push(("embed.pos".into(), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |field: &str| format!("blocks.{i}.{field}");
            out.extend([
                (p("ln1.gamma"), &b.ln1_gamma),
                (p("ln1.beta"), &b.ln1_beta),
                (p("attn.wq"), &b.wq),
                (p("attn.bq"), &b.bq),
                (p("attn.wk"), &b.wk),
                (p("attn.bk"), &b.bk),
                (p("attn.wv"), &b.wv),
                (p("attn.bv"), &b.bv),
                (p("attn.wo"), &b.wo),
                (p("attn.bo"), &b.bo),
                (p("ln2.gamma"), &b.ln2_gamma),
                (p("ln2.beta"), &b.ln2_beta),
                (p("mlp.fc1_w"), &b.fc1_w),
                (p("mlp.fc1_b"), &b.fc1_b),
                (p("mlp.fc2_w"), &b.fc2_w),
                (p("mlp.fc2_b"), &b.fc2_b),
            ]);
        }
        out.push(("norm.gamma".into(), &self.norm_gamma));
        out.push(("norm.beta".into(), &self.norm_beta));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        if let (Some(w), Some(b)) = (&self.dist_head_w, &self.dist_head_b) {
            out.push(("dist_head.w".into(), w));
            out.push(("dist_head.b".into(), b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed.proj_w".into(), &mut self.proj_w),
            ("embed.proj_b".into(), &mut self.proj_b),
            ("embed.class_token".into(), &mut self.class_token),
        ];
        if let Some(t) = &mut self.dist_token {
            out.push(("embed.dist_token".into(), t));
        }
        out.push(("embed.pos".into(), &mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |field: &str| format!("blocks.{i}.{field}");
            out.extend([
                (p("ln1.gamma"), &mut b.ln1_gamma),
                (p("ln1.beta"), &mut b.ln1_beta),
                (p("attn.wq"), &mut b.wq),
                (p("attn.bq"), &mut b.bq),
                (p("attn.wk"), &mut b.wk),
                (p("attn.bk"), &mut b.bk),
                (p("attn.wv"), &mut b.wv),
                (p("attn.bv"), &mut b.bv),
                (p("attn.wo"), &mut b.wo),
                (p("attn.bo"), &mut b.bo),
                (p("ln2.gamma"), &mut b.ln2_gamma),
                (p("ln2.beta"), &mut b.ln2_beta),
                (p("mlp.fc1_w"), &mut b.fc1_w),
                (p("mlp.fc1_b"), &mut b.fc1_b),
                (p("mlp.fc2_w"), &mut b.fc2_w),
                (p("mlp.fc2_b"), &mut b.fc2_b),
            ]);
        }
        out.push(("norm.gamma".into(), &mut self.norm_gamma));
        out.push(("norm.beta".into(), &mut self.norm_beta));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        if let (Some(w), Some(b)) = (&mut self.dist_head_w, &mut self.dist_head_b) {
            out.push(("dist_head.w".into(), w));
            out.push(("dist_head.b".into(), b));
        }
        out
    }

    /// Bind all parameters onto the tape. The returned handle list is
    /// aligned with `named_params` order.
    fn bind(&self, tape: &mut Tape) -> (BoundVit, Vec<Var>) {
        let mut vars = Vec::new();
        let put = |t: &Tensor, tape: &mut Tape, vars: &mut Vec<Var>| -> Var {
            let v = tape.leaf(t.clone().with_grad());
            vars.push(v);
            v
        };
        let proj_w = put(&self.proj_w, tape, &mut vars);
        let proj_b = put(&self.proj_b, tape, &mut vars);
        let class_token = put(&self.class_token, tape, &mut vars);
        let dist_token = self.dist_token.as_ref().map(|t| put(t, tape, &mut vars));
        let pos = put(&self.pos, tape, &mut vars);
        let blocks: Vec<TransformerBlockBound> = self
            .blocks
            .iter()
            .map(|b| TransformerBlockBound {
                ln1_gamma: put(&b.ln1_gamma, tape, &mut vars),
                ln1_beta: put(&b.ln1_beta, tape, &mut vars),
                attn: AttentionBound {
                    wq: put(&b.wq, tape, &mut vars),
                    bq: put(&b.bq, tape, &mut vars),
                    wk: put(&b.wk, tape, &mut vars),
                    bk: put(&b.bk, tape, &mut vars),
                    wv: put(&b.wv, tape, &mut vars),
                    bv: put(&b.bv, tape, &mut vars),
                    wo: put(&b.wo, tape, &mut vars),
                    bo: put(&b.bo, tape, &mut vars),
                },
                ln2_gamma: put(&b.ln2_gamma, tape, &mut vars),
                ln2_beta: put(&b.ln2_beta, tape, &mut vars),
                fc1_w: put(&b.fc1_w, tape, &mut vars),
                fc1_b: put(&b.fc1_b, tape, &mut vars),
                fc2_w: put(&b.fc2_w, tape, &mut vars),
                fc2_b: put(&b.fc2_b, tape, &mut vars),
            })
            .collect();
        let norm_gamma = put(&self.norm_gamma, tape, &mut vars);
        let norm_beta = put(&self.norm_beta, tape, &mut vars);
        let head_w = put(&self.head_w, tape, &mut vars);
        let head_b = put(&self.head_b, tape, &mut vars);
        let dist_head = match (&self.dist_head_w, &self.dist_head_b) {
            (Some(w), Some(b)) => {
                Some((put(w, tape, &mut vars), put(b, tape, &mut vars)))
            }
            _ => None,
        };
        (
            BoundVit {
                embed: PatchEmbedBound { proj_w, proj_b, class_token, dist_token, pos },
                blocks,
                norm_gamma,
                norm_beta,
                head_w,
                head_b,
                dist_head,
            },
            vars,
        )
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        images: &[Tensor],
        opts: ForwardOptions,
    ) -> Result<Traced> {
        let cfg = self.spec.patch_embed_config();
        let (bound, param_vars) = self.bind(tape);
        let mut class_rows = Vec::with_capacity(images.len());
        let mut dist_rows = Vec::with_capacity(images.len());
        let mut attention = Vec::new();
        for img in images {
            let x = tape.constant(img.clone());
            let patches = tape.patchify(x, cfg.patch)?;
            let mut seq = nn::embed_sequence(tape, patches, &cfg, &bound.embed)?;
            let mut per_layer = Vec::new();
            for block in &bound.blocks {
                let (next, atts) = nn::transformer_block(tape, seq, self.spec.heads, block)?;
                seq = next;
                if opts.capture_attention {
                    per_layer.push(atts);
                }
            }
            let seq = tape.layer_norm(seq, bound.norm_gamma, bound.norm_beta, LN_EPS)?;
            let cls = tape.slice_rows(seq, 0, 1)?;
            let logits = tape.matmul(cls, bound.head_w)?;
            class_rows.push(tape.add_row(logits, bound.head_b)?);
            if let Some((dw, db)) = bound.dist_head {
                let dist = tape.slice_rows(seq, 1, 1)?;
                let dlogits = tape.matmul(dist, dw)?;
                dist_rows.push(tape.add_row(dlogits, db)?);
            }
            if opts.capture_attention {
                attention.push(per_layer);
            }
        }
        let class_logits = tape.concat_rows(&class_rows)?;
        let dist_logits = if dist_rows.is_empty() {
            None
        } else {
            Some(tape.concat_rows(&dist_rows)?)
        };
        Ok(Traced {
            class_logits,
            dist_logits,
            attention,
            feature_map: None,
            bn_nodes: Vec::new(),
            param_vars,
        })
    }
}

struct BoundVit {
    embed: PatchEmbedBound,
    blocks: Vec<TransformerBlockBound>,
    norm_gamma: Var,
    norm_beta: Var,
    head_w: Var,
    head_b: Var,
    dist_head: Option<(Var, Var)>,
}
