//! Full architectures assembled from the nn blocks: ViT-S/B, DeiT-S/B,
//! DenseNet-121/201 plus desk-scale tiny variants, with deterministic
//! initialization, forward passes, parameter audits and checkpoint I/O.

mod checkpoint;
mod densenet;
mod vit;

pub use densenet::DenseNetModel;
pub use vit::VitModel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionRecord, PatchEmbedConfig, TokenSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Vit,
    Deit,
    Densenet,
}

/// Declarative architecture description. Transformer fields are ignored by
/// the DenseNet family and vice versa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub family: Family,
    /// Encoder layers (transformers).
    #[serde(default)]
    pub depth: usize,
    #[serde(default)]
    pub embed_dim: usize,
    #[serde(default)]
    pub heads: usize,
    #[serde(default)]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub patch_size: usize,
    /// Layers per dense block (DenseNets).
    #[serde(default)]
    pub block_config: Vec<usize>,
    #[serde(default)]
    pub growth_rate: usize,
    #[serde(default)]
    pub init_features: usize,
    /// Bottleneck width multiplier: the 1x1 conv emits bn_size * growth channels.
    #[serde(default)]
    pub bn_size: usize,
    pub num_classes: usize,
    /// Input (channels, height, width).
    pub input: (usize, usize, usize),
}

pub const PRESET_NAMES: [&str; 9] = [
    "densenet-121",
    "densenet-201",
    "vit-s",
    "vit-b",
    "deit-s",
    "deit-b",
    "vit-tiny",
    "deit-tiny",
    "cnn-tiny",
];

/// The models compared in the study, at full scale.
pub const PAPER_PRESETS: [&str; 6] =
    ["densenet-121", "densenet-201", "vit-s", "vit-b", "deit-s", "deit-b"];

impl ModelSpec {
    /// Resolve a named preset.
    pub fn preset(name: &str, num_classes: usize) -> Result<ModelSpec> {
        let vit = |name: &str, family, depth, dim, heads, patch, input: (usize, usize, usize)| ModelSpec {
            name: name.to_string(),
            family,
            depth,
            embed_dim: dim,
            heads,
            mlp_ratio: 4,
            patch_size: patch,
            block_config: Vec::new(),
            growth_rate: 0,
            init_features: 0,
            bn_size: 0,
            num_classes,
            input,
        };
        let dense = |name: &str, blocks: &[usize], growth, init, bn_size, input| ModelSpec {
            name: name.to_string(),
            family: Family::Densenet,
            depth: 0,
            embed_dim: 0,
            heads: 0,
            mlp_ratio: 0,
            patch_size: 0,
            block_config: blocks.to_vec(),
            growth_rate: growth,
            init_features: init,
            bn_size,
            num_classes,
            input,
        };
        let full = (3, 224, 224);
        let tiny = (3, 32, 32);
        let spec = match name {
            "vit-s" => vit("vit-s", Family::Vit, 12, 384, 6, 16, full),
            "vit-b" => vit("vit-b", Family::Vit, 12, 768, 12, 16, full),
            "deit-s" => vit("deit-s", Family::Deit, 12, 384, 6, 16, full),
            "deit-b" => vit("deit-b", Family::Deit, 12, 768, 12, 16, full),
            "vit-tiny" => vit("vit-tiny", Family::Vit, 4, 64, 4, 8, tiny),
            "deit-tiny" => vit("deit-tiny", Family::Deit, 4, 64, 4, 8, tiny),
            "densenet-121" => dense("densenet-121", &[6, 12, 24, 16], 32, 64, 4, full),
            "densenet-201" => dense("densenet-201", &[6, 12, 48, 32], 32, 64, 4, full),
            "cnn-tiny" => dense("cnn-tiny", &[2, 2], 4, 8, 2, tiny),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset '{other}' (known: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        match self.family {
            Family::Vit | Family::Deit => {
                if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 {
                    return Err(Error::Config(format!(
                        "transformer spec '{}' needs depth/embed_dim/heads",
                        self.name
                    )));
                }
                if self.embed_dim % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "embed dim {} not divisible by {} heads",
                        self.embed_dim, self.heads
                    )));
                }
                self.patch_embed_config().validate()
            }
            Family::Densenet => {
                if self.block_config.is_empty() || self.growth_rate == 0 || self.init_features == 0
                {
                    return Err(Error::Config(format!(
                        "densenet spec '{}' needs block_config/growth_rate/init_features",
                        self.name
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn token_set(&self) -> TokenSet {
        match self.family {
            Family::Deit => TokenSet::ClassAndDistillation,
            _ => TokenSet::ClassOnly,
        }
    }

    pub fn patch_embed_config(&self) -> PatchEmbedConfig {
        PatchEmbedConfig {
            image_h: self.input.1,
            image_w: self.input.2,
            channels: self.input.0,
            patch: self.patch_size,
            embed_dim: self.embed_dim,
            token_set: self.token_set(),
        }
    }

    pub fn is_transformer(&self) -> bool {
        matches!(self.family, Family::Vit | Family::Deit)
    }

    /// Trainable parameter count without materializing the model.
    pub fn parameter_count(&self) -> usize {
        let shapes = match self.family {
            Family::Vit | Family::Deit => vit::param_shapes(self),
            Family::Densenet => densenet::param_shapes(self),
        };
        shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// What the forward pass should produce beyond logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Train mode: batch-statistics normalization in CNNs.
    pub train: bool,
    pub capture_attention: bool,
    pub capture_features: bool,
}

/// Tape handles produced by a traced forward pass.
pub struct Traced {
    /// [B, num_classes] raw logits of the classification head.
    pub class_logits: Var,
    /// [B, num_classes] distillation-head logits (DeiT only).
    pub dist_logits: Option<Var>,
    /// Per image, per layer, per head attention weight nodes.
    pub attention: Vec<Vec<Vec<Var>>>,
    /// Last conv-stage activations [B, C, h, w] (DenseNet only).
    pub feature_map: Option<Var>,
    /// Train-mode batch-norm nodes, in model order.
    pub bn_nodes: Vec<Var>,
    /// Bound parameter handles, aligned with `named_params` order.
    pub param_vars: Vec<Var>,
}

/// Detached forward results.
pub struct ForwardOutput {
    pub class_logits: Tensor,
    pub dist_logits: Option<Tensor>,
    /// attention[image][layer]
    pub attention: Option<Vec<Vec<AttentionRecord>>>,
    pub feature_maps: Option<Tensor>,
}

#[derive(Clone)]
pub enum Model {
    Vit(VitModel),
    DenseNet(DenseNetModel),
}

impl Model {
    /// Deterministically initialize a model from its spec and a seed.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        match spec.family {
            Family::Vit | Family::Deit => Ok(Model::Vit(VitModel::build(spec.clone(), seed))),
            Family::Densenet => Ok(Model::DenseNet(DenseNetModel::build(spec.clone(), seed))),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            Model::Vit(m) => &m.spec,
            Model::DenseNet(m) => &m.spec,
        }
    }

    /// Ordered trainable parameters.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Model::Vit(m) => m.named_params(),
            Model::DenseNet(m) => m.named_params(),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Model::Vit(m) => m.named_params_mut(),
            Model::DenseNet(m) => m.named_params_mut(),
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        match self {
            Model::Vit(_) => Vec::new(),
            Model::DenseNet(m) => m.named_buffers(),
        }
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Model::Vit(_) => Vec::new(),
            Model::DenseNet(m) => m.named_buffers_mut(),
        }
    }

    /// Exact count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Record a forward pass of a batch of [C, H, W] images on `tape`.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        images: &[Tensor],
        opts: ForwardOptions,
    ) -> Result<Traced> {
        if images.is_empty() {
            return Err(Error::Contract("forward requires at least one image".into()));
        }
        let (c, h, w) = self.spec().input;
        for img in images {
            if img.shape() != [c, h, w] {
                return Err(Error::dim(
                    "forward",
                    format!("input shape {:?}, model expects [{c}, {h}, {w}]", img.shape()),
                ));
            }
        }
        match self {
            Model::Vit(m) => m.forward_traced(tape, images, opts),
            Model::DenseNet(m) => m.forward_traced(tape, images, opts),
        }
    }

    /// Convenience forward on a fresh tape, returning detached outputs.
    pub fn forward(&self, images: &[Tensor], opts: ForwardOptions) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let traced = self.forward_traced(&mut tape, images, opts)?;
        let attention = if opts.capture_attention {
            let mut per_image = Vec::with_capacity(traced.attention.len());
            for layers in &traced.attention {
                let mut recs = Vec::with_capacity(layers.len());
                for heads in layers {
                    recs.push(AttentionRecord::from_heads(&tape, heads)?);
                }
                per_image.push(recs);
            }
            Some(per_image)
        } else {
            None
        };
        Ok(ForwardOutput {
            class_logits: tape.detach(traced.class_logits),
            dist_logits: traced.dist_logits.map(|v| tape.detach(v)),
            attention,
            feature_maps: traced.feature_map.map(|v| tape.detach(v)),
        })
    }

    /// Fold train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, tape: &Tape, traced: &Traced, momentum: f64) {
        if let Model::DenseNet(m) = self {
            m.update_running_stats(tape, &traced.bn_nodes, momentum);
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Model> {
        checkpoint::load(path)
    }
}

/// Stack per-image [C, H, W] tensors into one [B, C, H, W] batch.
pub(crate) fn stack_images(images: &[Tensor]) -> Tensor {
    let s = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), s[0], s[1], s[2]], data).expect("stacked shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_preset_is_config_error() {
        assert!(matches!(ModelSpec::preset("resnet-50", 5), Err(Error::Config(_))));
    }

    #[test]
    fn preset_table_parameter_counts() {
        // exact architecture arithmetic for the standard DenseNet (Huang et
        // al.) and ViT/DeiT (Dosovitskiy et al. / Touvron et al.) layouts at
        // five classes, in millions at two decimals
        let cases = [
            ("densenet-121", 6_958_981, 6.96),
            ("densenet-201", 18_102_533, 18.10),
            ("vit-s", 21_667_589, 21.67),
            ("vit-b", 85_802_501, 85.80),
            ("deit-s", 21_670_282, 21.67),
            ("deit-b", 85_807_882, 85.81),
        ];
        for (name, exact, millions) in cases {
            let spec = ModelSpec::preset(name, 5).unwrap();
            let count = spec.parameter_count();
            assert_eq!(count, exact, "{name}");
            let rounded = (count as f64 / 1e6 * 100.0).round() / 100.0;
            assert!((rounded - millions).abs() < 1e-9, "{name}: {rounded} vs {millions}");
            assert!(
                (count as f64 / 1e6 - millions).abs() / millions < 0.01,
                "{name} outside 1% of published value"
            );
        }
    }

    #[test]
    fn deit_exceeds_vit_by_token_pos_row_and_head() {
        // extra distillation token (D) + extra position row (D) + extra head
        // (D*K + K)
        for (s, b, d) in [("vit-s", "deit-s", 384usize), ("vit-b", "deit-b", 768)] {
            let vit = ModelSpec::preset(s, 5).unwrap().parameter_count();
            let deit = ModelSpec::preset(b, 5).unwrap().parameter_count();
            assert_eq!(deit - vit, 2 * d + d * 5 + 5);
        }
    }

    #[test]
    fn built_tiny_models_match_spec_shape_enumeration() {
        for name in ["vit-tiny", "deit-tiny", "cnn-tiny"] {
            let spec = ModelSpec::preset(name, 5).unwrap();
            let model = Model::build(&spec, 1).unwrap();
            let built: Vec<(String, Vec<usize>)> = model
                .named_params()
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect();
            let enumerated = match spec.family {
                Family::Densenet => super::densenet::param_shapes(&spec),
                _ => super::vit::param_shapes(&spec),
            };
            assert_eq!(built, enumerated, "{name}");
            assert_eq!(model.parameter_count(), spec.parameter_count());
        }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ModelSpec::preset("vit-tiny", 5).unwrap();
        let a = Model::build(&spec, 42).unwrap();
        let b = Model::build(&spec, 42).unwrap();
        for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(ta.data(), tb.data());
        }
        let c = Model::build(&spec, 43).unwrap();
        let any_diff = a
            .named_params()
            .iter()
            .zip(c.named_params())
            .any(|((_, ta), (_, tb))| ta.data() != tb.data());
        assert!(any_diff, "different seeds must give different weights");
    }
}
