//! Densely connected CNN: 7x7/2 conv stem with 3x3/2 max pool, dense blocks
//! joined by half-compression transitions, batch norm throughout, global
//! average pooling and a linear head.

use super::{stack_images, ForwardOptions, ModelSpec, Traced};
use crate::error::Result;
use crate::nn::{self, BnBound, DenseLayerBound};
use crate::rng::Rng;
use crate::tensor::{PoolKind, Tape, Tensor, Var};

#[derive(Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnParams {
    fn identity(c: usize) -> BnParams {
        BnParams {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::ones(&[c]),
        }
    }

    fn bind(&self, tape: &mut Tape, vars: &mut Vec<Var>) -> BnBound {
        let gamma = tape.leaf(self.gamma.clone().with_grad());
        vars.push(gamma);
        let beta = tape.leaf(self.beta.clone().with_grad());
        vars.push(beta);
        BnBound {
            gamma,
            beta,
            running_mean: self.running_mean.data().to_vec(),
            running_var: self.running_var.data().to_vec(),
        }
    }
}

#[derive(Clone)]
pub struct DenseLayerParams {
    pub bn1: BnParams,
    pub conv1: Tensor,
    pub bn2: BnParams,
    pub conv2: Tensor,
}

#[derive(Clone)]
pub struct TransitionParams {
    pub bn: BnParams,
    pub conv: Tensor,
}

#[derive(Clone)]
pub struct DenseNetModel {
    pub spec: ModelSpec,
    pub stem_conv: Tensor,
    pub stem_bn: BnParams,
    pub blocks: Vec<Vec<DenseLayerParams>>,
    pub transitions: Vec<TransitionParams>,
    pub final_bn: BnParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Channel plan: (per-block input channel lists, per-transition (in, out),
/// final feature count).
#[allow(clippy::type_complexity)]
fn channel_plan(spec: &ModelSpec) -> (Vec<Vec<usize>>, Vec<(usize, usize)>, usize) {
    let g = spec.growth_rate;
    let mut c = spec.init_features;
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    for (i, &layers) in spec.block_config.iter().enumerate() {
        let ins: Vec<usize> = (0..layers).map(|j| c + j * g).collect();
        c += layers * g;
        blocks.push(ins);
        if i + 1 < spec.block_config.len() {
            transitions.push((c, c / 2));
            c /= 2;
        }
    }
    (blocks, transitions, c)
}

/// Ordered trainable parameter shapes; single source of truth for counting
/// and checkpoint layout.
pub fn param_shapes(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let (blocks, transitions, nfeat) = channel_plan(spec);
    let inter = spec.bn_size * spec.growth_rate;
    let g = spec.growth_rate;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("stem.conv".into(), vec![spec.init_features, spec.input.0, 7, 7]),
        ("stem.bn.gamma".into(), vec![spec.init_features]),
        ("stem.bn.beta".into(), vec![spec.init_features]),
    ];
    for (i, ins) in blocks.iter().enumerate() {
        for (j, &c_in) in ins.iter().enumerate() {
            let p = |field: &str| format!("blocks.{i}.{j}.{field}");
            out.extend([
                (p("bn1.gamma"), vec![c_in]),
                (p("bn1.beta"), vec![c_in]),
                (p("conv1"), vec![inter, c_in, 1, 1]),
                (p("bn2.gamma"), vec![inter]),
                (p("bn2.beta"), vec![inter]),
                (p("conv2"), vec![g, inter, 3, 3]),
            ]);
        }
        if i < transitions.len() {
            let (c_in, c_out) = transitions[i];
            let p = |field: &str| format!("transitions.{i}.{field}");
            out.extend([
                (p("bn.gamma"), vec![c_in]),
                (p("bn.beta"), vec![c_in]),
                (p("conv"), vec![c_out, c_in, 1, 1]),
            ]);
        }
    }
    out.push(("norm.final.gamma".into(), vec![nfeat]));
    out.push(("norm.final.beta".into(), vec![nfeat]));
    out.push(("head.w".into(), vec![nfeat, spec.num_classes]));
    out.push(("head.b".into(), vec![spec.num_classes]));
    out
}

/// Kaiming-style truncated normal for conv kernels.
fn conv_init(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let sigma = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.trunc_normal(sigma)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl DenseNetModel {
    pub fn build(spec: ModelSpec, seed: u64) -> DenseNetModel {
        let mut rng = Rng::derive(seed, &[0x444E_5321]);
        let (block_ins, transition_chs, nfeat) = channel_plan(&spec);
        let inter = spec.bn_size * spec.growth_rate;
        let g = spec.growth_rate;

        let stem_conv = conv_init(&mut rng, &[spec.init_features, spec.input.0, 7, 7]);
        let stem_bn = BnParams::identity(spec.init_features);
        let blocks: Vec<Vec<DenseLayerParams>> = block_ins
            .iter()
            .map(|ins| {
                ins.iter()
                    .map(|&c_in| DenseLayerParams {
                        bn1: BnParams::identity(c_in),
                        conv1: conv_init(&mut rng, &[inter, c_in, 1, 1]),
                        bn2: BnParams::identity(inter),
                        conv2: conv_init(&mut rng, &[g, inter, 3, 3]),
                    })
                    .collect()
            })
            .collect();
        let transitions: Vec<TransitionParams> = transition_chs
            .iter()
            .map(|&(c_in, c_out)| TransitionParams {
                bn: BnParams::identity(c_in),
                conv: conv_init(&mut rng, &[c_out, c_in, 1, 1]),
            })
            .collect();
        let final_bn = BnParams::identity(nfeat);
        let head_w = {
            let data: Vec<f64> =
                (0..nfeat * spec.num_classes).map(|_| rng.trunc_normal(0.02)).collect();
            Tensor::new(vec![nfeat, spec.num_classes], data).expect("head shape")
        };
        let head_b = Tensor::zeros(&[spec.num_classes]);
        DenseNetModel { spec, stem_conv, stem_bn, blocks, transitions, final_bn, head_w, head_b }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("stem.conv".into(), &self.stem_conv),
            ("stem.bn.gamma".into(), &self.stem_bn.gamma),
            ("stem.bn.beta".into(), &self.stem_bn.beta),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            for (j, l) in block.iter().enumerate() {
                let p = |field: &str| format!("blocks.{i}.{j}.{field}");
                out.extend([
                    (p("bn1.gamma"), &l.bn1.gamma),
                    (p("bn1.beta"), &l.bn1.beta),
                    (p("conv1"), &l.conv1),
                    (p("bn2.gamma"), &l.bn2.gamma),
                    (p("bn2.beta"), &l.bn2.beta),
                    (p("conv2"), &l.conv2),
                ]);
            }
            if i < self.transitions.len() {
                let t = &self.transitions[i];
                let p = |field: &str| format!("transitions.{i}.{field}");
                out.extend([
                    (p("bn.gamma"), &t.bn.gamma),
                    (p("bn.beta"), &t.bn.beta),
                    (p("conv"), &t.conv),
                ]);
            }
        }
        out.push(("norm.final.gamma".into(), &self.final_bn.gamma));
        out.push(("norm.final.beta".into(), &self.final_bn.beta));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("stem.conv".into(), &mut self.stem_conv),
            ("stem.bn.gamma".into(), &mut self.stem_bn.gamma),
            ("stem.bn.beta".into(), &mut self.stem_bn.beta),
        ];
        let n_transitions = self.transitions.len();
        let mut transitions = self.transitions.iter_mut();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (j, l) in block.iter_mut().enumerate() {
                let p = |field: &str| format!("blocks.{i}.{j}.{field}");
                out.extend([
                    (p("bn1.gamma"), &mut l.bn1.gamma),
                    (p("bn1.beta"), &mut l.bn1.beta),
                    (p("conv1"), &mut l.conv1),
                    (p("bn2.gamma"), &mut l.bn2.gamma),
                    (p("bn2.beta"), &mut l.bn2.beta),
                    (p("conv2"), &mut l.conv2),
                ]);
            }
            if i < n_transitions {
                let t = transitions.next().expect("transition per non-final block");
                let p = |field: &str| format!("transitions.{i}.{field}");
                out.extend([
                    (p("bn.gamma"), &mut t.bn.gamma),
                    (p("bn.beta"), &mut t.bn.beta),
                    (p("conv"), &mut t.conv),
                ]);
            }
        }
        out.push(("norm.final.gamma".into(), &mut self.final_bn.gamma));
        out.push(("norm.final.beta".into(), &mut self.final_bn.beta));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    fn bn_in_forward_order(&self) -> Vec<&BnParams> {
        let mut out = vec![&self.stem_bn];
        for (i, block) in self.blocks.iter().enumerate() {
            for l in block {
                out.push(&l.bn1);
                out.push(&l.bn2);
            }
            if i < self.transitions.len() {
                out.push(&self.transitions[i].bn);
            }
        }
        out.push(&self.final_bn);
        out
    }

    fn bn_in_forward_order_mut(&mut self) -> Vec<&mut BnParams> {
        let mut out = vec![&mut self.stem_bn];
        let n_transitions = self.transitions.len();
        let mut transitions = self.transitions.iter_mut();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for l in block.iter_mut() {
                out.push(&mut l.bn1);
                out.push(&mut l.bn2);
            }
            if i < n_transitions {
                out.push(&mut transitions.next().expect("transition").bn);
            }
        }
        out.push(&mut self.final_bn);
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (idx, bn) in self.bn_in_forward_order().into_iter().enumerate() {
            out.push((format!("bn.{idx}.running_mean"), &bn.running_mean));
            out.push((format!("bn.{idx}.running_var"), &bn.running_var));
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (idx, bn) in self.bn_in_forward_order_mut().into_iter().enumerate() {
            let BnParams { running_mean, running_var, .. } = bn;
            out.push((format!("bn.{idx}.running_mean"), running_mean));
            out.push((format!("bn.{idx}.running_var"), running_var));
        }
        out
    }

    fn bind(&self, tape: &mut Tape) -> (BoundDenseNet, Vec<Var>) {
        let mut vars = Vec::new();
        let stem_conv = tape.leaf(self.stem_conv.clone().with_grad());
        vars.push(stem_conv);
        let stem_bn = self.stem_bn.bind(tape, &mut vars);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut transitions = Vec::with_capacity(self.transitions.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let mut layers = Vec::with_capacity(block.len());
            for l in block {
                let bn1 = l.bn1.bind(tape, &mut vars);
                let conv1_w = tape.leaf(l.conv1.clone().with_grad());
                vars.push(conv1_w);
                let bn2 = l.bn2.bind(tape, &mut vars);
                let conv2_w = tape.leaf(l.conv2.clone().with_grad());
                vars.push(conv2_w);
                layers.push(DenseLayerBound { bn1, conv1_w, bn2, conv2_w });
            }
            blocks.push(layers);
            if i < self.transitions.len() {
                let t = &self.transitions[i];
                let bn = t.bn.bind(tape, &mut vars);
                let conv = tape.leaf(t.conv.clone().with_grad());
                vars.push(conv);
                transitions.push((bn, conv));
            }
        }
        let final_bn = self.final_bn.bind(tape, &mut vars);
        let head_w = tape.leaf(self.head_w.clone().with_grad());
        vars.push(head_w);
        let head_b = tape.leaf(self.head_b.clone().with_grad());
        vars.push(head_b);
        (BoundDenseNet { stem_conv, stem_bn, blocks, transitions, final_bn, head_w, head_b }, vars)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        images: &[Tensor],
        opts: ForwardOptions,
    ) -> Result<Traced> {
        let (bound, param_vars) = self.bind(tape);
        let batch = tape.constant(stack_images(images));
        let mut bn_nodes = Vec::new();

        let x = tape.conv2d(batch, bound.stem_conv, 2, 3)?;
        let b = nn::batch_norm(tape, x, &bound.stem_bn, opts.train)?;
        bn_nodes.push(b);
        let x = tape.relu(b);
        let mut x = tape.pool(x, PoolKind::Max, 3, 2, 1)?;

        for (i, layers) in bound.blocks.iter().enumerate() {
            let (y, bns) = nn::dense_block(tape, x, layers, opts.train)?;
            bn_nodes.extend(bns);
            x = y;
            if i < bound.transitions.len() {
                let (bn, conv) = &bound.transitions[i];
                let b = nn::batch_norm(tape, x, bn, opts.train)?;
                bn_nodes.push(b);
                let r = tape.relu(b);
                let c = tape.conv2d(r, *conv, 1, 0)?;
                x = tape.pool(c, PoolKind::Avg, 2, 2, 0)?;
            }
        }

        let b = nn::batch_norm(tape, x, &bound.final_bn, opts.train)?;
        bn_nodes.push(b);
        let feats = tape.relu(b);
        let gap = tape.pool(feats, PoolKind::GlobalAvg, 0, 1, 0)?;
        let nfeat = tape.value(gap).shape()[1];
        let flat = tape.reshape(gap, &[images.len(), nfeat])?;
        let logits = tape.matmul(flat, bound.head_w)?;
        let class_logits = tape.add_row(logits, bound.head_b)?;

        Ok(Traced {
            class_logits,
            dist_logits: None,
            attention: Vec::new(),
            feature_map: opts.capture_features.then_some(feats),
            bn_nodes,
            param_vars,
        })
    }

    /// Exponential-moving-average update of the running statistics from the
    /// batch statistics saved on the tape (unbiased variance).
    pub fn update_running_stats(&mut self, tape: &Tape, bn_nodes: &[Var], momentum: f64) {
        let params = self.bn_in_forward_order_mut();
        debug_assert_eq!(params.len(), bn_nodes.len());
        for (bn, &node) in params.into_iter().zip(bn_nodes) {
            let Some((means, vars)) = tape.batch_norm_stats(node) else { continue };
            let s = tape.value(node).shape();
            let m = (s[0] * s[2] * s[3]) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for (r, &b) in bn.running_mean.data_mut().iter_mut().zip(means) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, &b) in bn.running_var.data_mut().iter_mut().zip(vars) {
                *r = (1.0 - momentum) * *r + momentum * b * unbias;
            }
        }
    }
}

struct BoundDenseNet {
    stem_conv: Var,
    stem_bn: BnBound,
    blocks: Vec<Vec<DenseLayerBound>>,
    transitions: Vec<(BnBound, Var)>,
    final_bn: BnBound,
    head_w: Var,
    head_b: Var,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Model;

    fn tiny() -> ModelSpec {
        ModelSpec::preset("cnn-tiny", 5).unwrap()
    }

    fn random_images(n: usize, spec: &ModelSpec, seed: u64) -> Vec<Tensor> {
        let mut rng = Rng::new(seed);
        let (c, h, w) = spec.input;
        (0..n)
            .map(|_| {
                let data: Vec<f64> = (0..c * h * w).map(|_| rng.next_f64()).collect();
                Tensor::new(vec![c, h, w], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn forward_shapes_and_feature_capture() {
        let spec = tiny();
        let model = DenseNetModel::build(spec.clone(), 17);
        let imgs = random_images(3, &spec, 4);
        let mut tape = Tape::new();
        let traced = model
            .forward_traced(
                &mut tape,
                &imgs,
                ForwardOptions { capture_features: true, ..Default::default() },
            )
            .unwrap();
        assert_eq!(tape.value(traced.class_logits).shape(), &[3, 5]);
        assert!(traced.dist_logits.is_none());
        // 32 -> stem/2 -> 16 -> pool/2 -> 8 -> transition/2 -> 4
        let feats = tape.value(traced.feature_map.unwrap());
        assert_eq!(feats.shape(), &[3, 16, 4, 4]);
        assert!(feats.data().iter().all(|&v| v >= 0.0), "post-ReLU activations");
    }

    #[test]
    fn zero_head_zero_logits() {
        let spec = tiny();
        let mut model = DenseNetModel::build(spec.clone(), 17);
        model.head_w = Tensor::zeros(model.head_w.shape());
        model.head_b = Tensor::zeros(model.head_b.shape());
        let imgs = random_images(2, &spec, 8);
        let mut tape = Tape::new();
        let traced =
            model.forward_traced(&mut tape, &imgs, ForwardOptions::default()).unwrap();
        assert!(tape.value(traced.class_logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let spec = tiny();
        let mut model = DenseNetModel::build(spec.clone(), 7);
        let imgs = random_images(4, &spec, 2);
        let mut tape = Tape::new();
        let traced = model
            .forward_traced(&mut tape, &imgs, ForwardOptions { train: true, ..Default::default() })
            .unwrap();
        let before = model.stem_bn.running_mean.data().to_vec();
        model.update_running_stats(&tape, &traced.bn_nodes, 0.1);
        let after = model.stem_bn.running_mean.data();
        assert_ne!(before, after);
        // eval forward consumes the updated statistics and stays finite
        let out = Model::DenseNet(model).forward(&imgs, ForwardOptions::default()).unwrap();
        assert!(out.class_logits.is_finite());
    }

    #[test]
    fn buffers_enumerated_for_every_bn() {
        let model = DenseNetModel::build(tiny(), 1);
        // stem + 2 blocks x 2 layers x 2 + 1 transition + final = 1 + 8 + 1 + 1
        assert_eq!(model.bn_in_forward_order().len(), 11);
        assert_eq!(model.named_buffers().len(), 22);
    }
}
