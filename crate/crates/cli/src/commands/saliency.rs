//! `cxrlab saliency`: attention / Grad-CAM heatmaps for one image.

use std::path::PathBuf;

use clap::Args;
use cxrlab_core::data::pgm;
use cxrlab_core::models::{Family, Model};
use cxrlab_core::saliency::{
    attention_map_for, distillation_attention_map_for, export_overlay, grad_cam, map_to_csv,
    SaliencyMethod,
};
use cxrlab_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::write_resolved;

#[derive(Args)]
pub struct SaliencyArgs {
    /// Model checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PGM image
    #[arg(long)]
    image: PathBuf,
    /// attention (transformers) | grad_cam (densenets)
    #[arg(long)]
    method: String,
    /// Target class index (grad_cam only)
    #[arg(long)]
    class: Option<usize>,
    /// Output path prefix
    #[arg(long, default_value = "saliency/out")]
    out: PathBuf,
    /// Also export the distillation-token attention map (deit only)
    #[arg(long)]
    dist_token: bool,
}

#[derive(Serialize, Deserialize)]
struct SaliencyRunConfig {
    checkpoint: PathBuf,
    image: PathBuf,
    method: String,
    class: Option<usize>,
    dist_token: bool,
}

pub fn run(args: SaliencyArgs) -> Result<i32> {
    let method = SaliencyMethod::parse(&args.method)?;
    let model = Model::load(&args.checkpoint)?;
    // method/family pairing is a usage error, checked before any compute
    match (method, model.spec().family) {
        (SaliencyMethod::Attention, Family::Vit | Family::Deit) => {}
        (SaliencyMethod::GradCam, Family::Densenet) => {}
        (SaliencyMethod::Attention, Family::Densenet) => {
            return Err(Error::Config(
                "attention saliency needs a transformer checkpoint (use grad_cam)".into(),
            ))
        }
        (SaliencyMethod::GradCam, _) => {
            return Err(Error::Config(
                "grad_cam needs a densenet checkpoint (use attention)".into(),
            ))
        }
    }
    if method == SaliencyMethod::GradCam && args.class.is_none() {
        return Err(Error::Config("grad_cam needs --class".into()));
    }
    if args.dist_token && model.spec().family != Family::Deit {
        return Err(Error::Config("--dist-token needs a deit checkpoint".into()));
    }

    let image = pgm::read(&args.image)?;
    let map = match method {
        SaliencyMethod::Attention => attention_map_for(&model, &image)?,
        SaliencyMethod::GradCam => grad_cam(&model, &image, args.class.expect("checked"))?,
    };

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut written = export_overlay(&image, &map, &args.out)?;
    let csv_path = PathBuf::from(format!("{}_map.csv", args.out.to_string_lossy()));
    std::fs::write(&csv_path, map_to_csv(&map))?;
    written.push(csv_path);

    if args.dist_token {
        let dist_map = distillation_attention_map_for(&model, &image)?;
        let dist_prefix = PathBuf::from(format!("{}_dist", args.out.to_string_lossy()));
        written.extend(export_overlay(&image, &dist_map, &dist_prefix)?);
    }

    let cfg = SaliencyRunConfig {
        checkpoint: args.checkpoint,
        image: args.image,
        method: args.method,
        class: args.class,
        dist_token: args.dist_token,
    };
    write_resolved(&cfg, &PathBuf::from(format!("{}_config.json", args.out.to_string_lossy())))?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(0)
}
