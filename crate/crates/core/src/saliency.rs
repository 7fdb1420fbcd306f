//! Saliency: class-token attention maps for transformers, Grad-CAM for
//! CNNs, and heatmap export.

use std::path::Path;

use crate::data::{pgm, GrayImage};
use crate::error::{Error, Result};
use crate::models::{Family, ForwardOptions, Model};
use crate::nn::{AttentionRecord, PatchEmbedConfig, TokenSet};
use crate::tensor::{bilinear_resize, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyMethod {
    Attention,
    GradCam,
}

impl SaliencyMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(SaliencyMethod::Attention),
            "grad_cam" | "grad-cam" | "gradcam" => Ok(SaliencyMethod::GradCam),
            other => {
                Err(Error::Config(format!("unknown method '{other}' (attention | grad_cam)")))
            }
        }
    }
}

/// A saliency heatmap over the input image, min-max normalized to [0, 1]
/// (all-zero maps stay all-zero).
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub values: GrayImage,
    pub method: SaliencyMethod,
    pub source_layer: usize,
    /// Target class (Grad-CAM only).
    pub class: Option<usize>,
}

/// Min-max normalize in place; a constant positive map becomes all-ones, a
/// constant zero map stays zero.
fn min_max_normalize(values: &mut [f64]) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (hi - lo).abs() < 1e-300 {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        values.iter_mut().for_each(|v| *v = fill);
        return;
    }
    values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
}

/// Class-token attention of the final encoder layer: average the class-token
/// query row over heads, drop the token columns, reshape to the patch grid
/// (row-major), bilinearly upsample to image size and normalize.
pub fn attention_map(record: &AttentionRecord, cfg: &PatchEmbedConfig) -> Result<SaliencyMap> {
    let t_len = cfg.seq_len();
    if record.seq_len() != t_len {
        return Err(Error::Contract(format!(
            "attention sequence length {} does not match configuration {t_len}",
            record.seq_len()
        )));
    }
    let heads = record.num_heads();
    let n_tokens = cfg.token_set.count();
    let n = cfg.num_patches();
    let grid_w = cfg.image_w / cfg.patch;
    let grid_h = cfg.image_h / cfg.patch;

    // mean over heads of row 0 (class-token query), patch columns only
    let mut patch_row = vec![0.0; n];
    let data = record.weights.data();
    for h in 0..heads {
        let row0 = &data[h * t_len * t_len..h * t_len * t_len + t_len];
        for (i, v) in patch_row.iter_mut().enumerate() {
            *v += row0[n_tokens + i] / heads as f64;
        }
    }
    let mut upsampled = bilinear_resize(&patch_row, grid_h, grid_w, cfg.image_h, cfg.image_w);
    min_max_normalize(&mut upsampled);
    Ok(SaliencyMap {
        values: GrayImage { width: cfg.image_w, height: cfg.image_h, pixels: upsampled },
        method: SaliencyMethod::Attention,
        source_layer: 0,
        class: None,
    })
}

/// Last-layer attention map of a transformer model for one image.
pub fn attention_map_for(model: &Model, image: &GrayImage) -> Result<SaliencyMap> {
    if !model.spec().is_transformer() {
        return Err(Error::Config(format!(
            "attention saliency needs a transformer model, got '{}'",
            model.spec().name
        )));
    }
    let input = crate::train::prepare_input(image, model)?;
    let out = model.forward(
        &[input],
        ForwardOptions { capture_attention: true, ..Default::default() },
    )?;
    let layers = &out.attention.as_ref().expect("attention captured")[0];
    let last = layers.last().expect("at least one encoder layer");
    let mut map = attention_map(last, &model.spec().patch_embed_config())?;
    map.source_layer = layers.len() - 1;
    // maps are rendered against the original image size
    if image.height != map.values.height || image.width != map.values.width {
        let mut resized =
            bilinear_resize(&map.values.pixels, map.values.height, map.values.width, image.height, image.width);
        min_max_normalize(&mut resized);
        map.values = GrayImage { width: image.width, height: image.height, pixels: resized };
    }
    Ok(map)
}

/// Distillation-token attention map (row 1) of the final layer.
pub fn distillation_attention_map_for(model: &Model, image: &GrayImage) -> Result<SaliencyMap> {
    let cfg = model.spec().patch_embed_config();
    if cfg.token_set != TokenSet::ClassAndDistillation {
        return Err(Error::Config("model has no distillation token".into()));
    }
    let input = crate::train::prepare_input(image, model)?;
    let out = model.forward(
        &[input],
        ForwardOptions { capture_attention: true, ..Default::default() },
    )?;
    let layers = &out.attention.as_ref().expect("attention captured")[0];
    let record = layers.last().expect("at least one encoder layer");
    let t_len = cfg.seq_len();
    let heads = record.num_heads();
    let n_tokens = cfg.token_set.count();
    let n = cfg.num_patches();
    let mut patch_row = vec![0.0; n];
    let data = record.weights.data();
    for h in 0..heads {
        let row1 = &data[h * t_len * t_len + t_len..h * t_len * t_len + 2 * t_len];
        for (i, v) in patch_row.iter_mut().enumerate() {
            *v += row1[n_tokens + i] / heads as f64;
        }
    }
    let (grid_h, grid_w) = (cfg.image_h / cfg.patch, cfg.image_w / cfg.patch);
    let mut upsampled = bilinear_resize(&patch_row, grid_h, grid_w, image.height, image.width);
    min_max_normalize(&mut upsampled);
    Ok(SaliencyMap {
        values: GrayImage { width: image.width, height: image.height, pixels: upsampled },
        method: SaliencyMethod::Attention,
        source_layer: layers.len() - 1,
        class: None,
    })
}

/// Grad-CAM over the last conv-stage activations: channel weights are the
/// globally averaged gradients of the class logit, the map is the rectified
/// weighted sum, upsampled and normalized.
pub fn grad_cam(model: &Model, image: &GrayImage, class: usize) -> Result<SaliencyMap> {
    if model.spec().family != Family::Densenet {
        return Err(Error::Config(format!(
            "grad_cam needs a densenet model, got '{}'",
            model.spec().name
        )));
    }
    let num_classes = model.spec().num_classes;
    if class >= num_classes {
        return Err(Error::Contract(format!(
            "class index {class} out of range for {num_classes} classes"
        )));
    }
    let input = crate::train::prepare_input(image, model)?;
    let mut tape = Tape::new();
    let traced = model.forward_traced(
        &mut tape,
        &[input],
        ForwardOptions { capture_features: true, ..Default::default() },
    )?;
    let feature_var = traced.feature_map.expect("densenet captures features");
    let logit = tape.slice_cols(traced.class_logits, class, 1)?;
    let scalar = tape.sum_all(logit);
    tape.backward(scalar)?;

    let feats = tape.value(feature_var);
    let grads = tape
        .grad(feature_var)
        .ok_or_else(|| Error::Contract("feature map received no gradient".into()))?;
    let s = feats.shape().to_vec(); // [1, C, h, w]
    let (c, h, w) = (s[1], s[2], s[3]);
    let hw = h * w;
    let mut map = vec![0.0; hw];
    for ch in 0..c {
        let alpha: f64 = grads[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (i, m) in map.iter_mut().enumerate() {
            *m += alpha * feats.data()[ch * hw + i];
        }
    }
    for v in &mut map {
        *v = v.max(0.0);
    }
    let mut upsampled = bilinear_resize(&map, h, w, image.height, image.width);
    min_max_normalize(&mut upsampled);
    Ok(SaliencyMap {
        values: GrayImage { width: image.width, height: image.height, pixels: upsampled },
        method: SaliencyMethod::GradCam,
        source_layer: 0,
        class: Some(class),
    })
}

/// Write `<prefix>_image.pgm`, `<prefix>_map.pgm` (a side-by-side pair) and
/// `<prefix>_blend.pgm` (0.5 image + 0.5 map). Returns the written paths.
pub fn export_overlay(
    image: &GrayImage,
    map: &SaliencyMap,
    prefix: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    if image.width != map.values.width || image.height != map.values.height {
        return Err(Error::dim(
            "export_overlay",
            format!(
                "image {}x{} vs map {}x{}",
                image.height, image.width, map.values.height, map.values.width
            ),
        ));
    }
    let stem = prefix.to_string_lossy();
    let paths = vec![
        std::path::PathBuf::from(format!("{stem}_image.pgm")),
        std::path::PathBuf::from(format!("{stem}_map.pgm")),
        std::path::PathBuf::from(format!("{stem}_blend.pgm")),
    ];
    let blend = GrayImage {
        width: image.width,
        height: image.height,
        pixels: image
            .pixels
            .iter()
            .zip(&map.values.pixels)
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect(),
    };
    pgm::write(&paths[0], image)?;
    pgm::write(&paths[1], &map.values)?;
    pgm::write(&paths[2], &blend)?;
    Ok(paths)
}

/// Raw map values as CSV rows, shortest-roundtrip formatted.
pub fn map_to_csv(map: &SaliencyMap) -> String {
    let mut out = String::new();
    for y in 0..map.values.height {
        let row: Vec<String> =
            (0..map.values.width).map(|x| format!("{}", map.values.at(y, x))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn patch_cfg() -> PatchEmbedConfig {
        PatchEmbedConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch: 4,
            embed_dim: 8,
            token_set: TokenSet::ClassOnly,
        }
    }

    fn record_from_rows(rows: Vec<Vec<f64>>, heads: usize) -> AttentionRecord {
        let t = rows.len();
        let mut data = Vec::new();
        for _ in 0..heads {
            for r in &rows {
                data.extend_from_slice(r);
            }
        }
        AttentionRecord { weights: Tensor::new(vec![heads, t, t], data).unwrap() }
    }

    #[test]
    fn uniform_attention_gives_constant_map() {
        let cfg = patch_cfg();
        let t = cfg.seq_len();
        let rows = vec![vec![1.0 / t as f64; t]; t];
        let record = record_from_rows(rows, 2);
        let map = attention_map(&record, &cfg).unwrap();
        // normalized all-ones
        for &v in &map.values.pixels {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn concentrated_attention_peaks_inside_that_patch() {
        let cfg = patch_cfg(); // 2x2 patch grid
        let t = cfg.seq_len(); // 5
        for target_patch in 0..4 {
            let mut row0 = vec![0.0; t];
            row0[1 + target_patch] = 1.0;
            let mut rows = vec![row0];
            for _ in 1..t {
                rows.push(vec![1.0 / t as f64; t]);
            }
            let record = record_from_rows(rows, 3);
            let map = attention_map(&record, &cfg).unwrap();
            // find argmax pixel
            let (mut best, mut best_idx) = (f64::NEG_INFINITY, 0);
            for (i, &v) in map.values.pixels.iter().enumerate() {
                if v > best {
                    best = v;
                    best_idx = i;
                }
            }
            let (y, x) = (best_idx / 8, best_idx % 8);
            let (py, px) = (target_patch / 2, target_patch % 2);
            assert!(
                (py * 4..(py + 1) * 4).contains(&y) && (px * 4..(px + 1) * 4).contains(&x),
                "patch {target_patch}: peak at ({y},{x})"
            );
        }
    }

    #[test]
    fn two_by_two_grid_matches_bilinear_oracle() {
        let cfg = patch_cfg();
        let t = cfg.seq_len();
        let mut row0 = vec![0.0; t];
        row0[1..5].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let mut rows = vec![row0];
        for _ in 1..t {
            rows.push(vec![1.0 / t as f64; t]);
        }
        let record = record_from_rows(rows, 1);
        let map = attention_map(&record, &cfg).unwrap();
        // oracle: same bilinear upsample + min-max, computed independently
        let grid = [0.1, 0.2, 0.3, 0.4];
        let mut expect = bilinear_resize(&grid, 2, 2, 8, 8);
        let (lo, hi) = (0.1, 0.4);
        for v in &mut expect {
            *v = (*v - lo) / (hi - lo);
        }
        for (a, b) in map.values.pixels.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_length_mismatch_is_contract_error() {
        let cfg = patch_cfg();
        let record = record_from_rows(vec![vec![1.0]], 1); // T = 1
        assert!(matches!(attention_map(&record, &cfg), Err(Error::Contract(_))));
    }

    fn random_image(seed: u64, size: usize) -> GrayImage {
        let mut rng = Rng::new(seed);
        GrayImage {
            width: size,
            height: size,
            pixels: (0..size * size).map(|_| rng.next_f64()).collect(),
        }
    }

    #[test]
    fn grad_cam_zero_head_gives_all_zero_map() {
        let spec = ModelSpec::preset("cnn-tiny", 5).unwrap();
        let mut model = Model::build(&spec, 5).unwrap();
        if let Model::DenseNet(m) = &mut model {
            // zero weights for class 2 only
            let k = m.head_w.shape()[1];
            for row in 0..m.head_w.shape()[0] {
                m.head_w.data_mut()[row * k + 2] = 0.0;
            }
            m.head_b.data_mut()[2] = 0.0;
        }
        let img = random_image(3, 32);
        let map = grad_cam(&model, &img, 2).unwrap();
        assert!(map.values.pixels.iter().all(|&v| v == 0.0), "all-zero map stays zero");
    }

    #[test]
    fn grad_cam_is_nonnegative_and_class_checked() {
        let spec = ModelSpec::preset("cnn-tiny", 5).unwrap();
        let model = Model::build(&spec, 6).unwrap();
        let img = random_image(4, 32);
        let map = grad_cam(&model, &img, 1).unwrap();
        assert!(map.values.pixels.iter().all(|&v| v >= 0.0));
        assert_eq!(map.values.width, 32);
        assert!(matches!(grad_cam(&model, &img, 9), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_cam_matches_alpha_times_activation_oracle_single_channel() {
        // single-channel toy: one dense layer, growth 1 -> final features
        // small enough to recompose by hand from captured values
        let spec = ModelSpec {
            name: "toy-cnn".into(),
            family: Family::Densenet,
            depth: 0,
            embed_dim: 0,
            heads: 0,
            mlp_ratio: 0,
            patch_size: 0,
            block_config: vec![1],
            growth_rate: 1,
            init_features: 1,
            bn_size: 1,
            num_classes: 2,
            input: (1, 16, 16),
        };
        let model = Model::build(&spec, 9).unwrap();
        let img = random_image(5, 16);
        let input = crate::train::prepare_input(&img, &model).unwrap();
        let mut tape = Tape::new();
        let traced = model
            .forward_traced(
                &mut tape,
                &[input],
                ForwardOptions { capture_features: true, ..Default::default() },
            )
            .unwrap();
        let fv = traced.feature_map.unwrap();
        let logit = tape.slice_cols(traced.class_logits, 0, 1).unwrap();
        let scalar = tape.sum_all(logit);
        tape.backward(scalar).unwrap();
        let feats = tape.value(fv).clone();
        let grads = tape.grad(fv).unwrap().to_vec();
        let s = feats.shape().to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        let hw = h * w;
        let mut oracle = vec![0.0; hw];
        for ch in 0..c {
            let alpha: f64 = grads[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
            for i in 0..hw {
                oracle[i] += alpha * feats.data()[ch * hw + i];
            }
        }
        for v in &mut oracle {
            *v = v.max(0.0);
        }
        let mut oracle_up = bilinear_resize(&oracle, h, w, 16, 16);
        min_max_normalize(&mut oracle_up);
        let map = grad_cam(&model, &img, 0).unwrap();
        for (a, b) in map.values.pixels.iter().zip(&oracle_up) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn export_overlay_writes_pair_and_blend() {
        let dir = std::env::temp_dir().join(format!("cxrlab-sal-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = random_image(7, 16);
        let map = SaliencyMap {
            values: GrayImage::new(16, 16),
            method: SaliencyMethod::GradCam,
            source_layer: 0,
            class: Some(1),
        };
        let paths = export_overlay(&img, &map, &dir.join("out")).unwrap();
        assert_eq!(paths.len(), 3);
        // all-zero map -> blend is exactly half the image, quantized
        let blend = pgm::read(&paths[2]).unwrap();
        for (b, i) in blend.pixels.iter().zip(&img.pixels) {
            let expect = ((0.5 * i * 255.0).round()) / 255.0;
            assert!((b - expect).abs() < 1e-9);
        }
        // written map reproduces the map quantized to 8 bits
        let map_back = pgm::read(&paths[1]).unwrap();
        assert_eq!(map_back.pixels, vec![0.0; 256]);
        for p in paths {
            std::fs::remove_file(p).ok();
        }
    }

    #[test]
    fn distillation_token_map_needs_deit_and_shares_dimensions() {
        let deit = Model::build(&ModelSpec::preset("deit-tiny", 5).unwrap(), 2).unwrap();
        let vit = Model::build(&ModelSpec::preset("vit-tiny", 5).unwrap(), 2).unwrap();
        let img = random_image(9, 32);
        let map = distillation_attention_map_for(&deit, &img).unwrap();
        assert_eq!((map.values.width, map.values.height), (32, 32));
        assert!(map.values.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(distillation_attention_map_for(&vit, &img).is_err());
    }

    #[test]
    fn method_family_pairing_is_checked() {
        let vit = Model::build(&ModelSpec::preset("vit-tiny", 5).unwrap(), 1).unwrap();
        let cnn = Model::build(&ModelSpec::preset("cnn-tiny", 5).unwrap(), 1).unwrap();
        let img = random_image(8, 32);
        assert!(grad_cam(&vit, &img, 0).is_err());
        assert!(attention_map_for(&cnn, &img).is_err());
        assert!(attention_map_for(&vit, &img).is_ok());
        assert!(grad_cam(&cnn, &img, 0).is_ok());
    }
}
