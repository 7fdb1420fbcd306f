//! `cxrlab synth`: write a synthetic dataset to disk.

use std::path::PathBuf;

use clap::Args;
use cxrlab_core::data::synth::{synth_generate, write_dataset, SynthSpec};
use cxrlab_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{file_u64, overlay_file, resolve_seed, write_resolved};

#[derive(Args)]
pub struct SynthArgs {
    /// Number of images
    #[arg(long, short = 'n')]
    n: Option<usize>,
    /// Image side length in pixels
    #[arg(long)]
    size: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct SynthRunConfig {
    n: usize,
    size: usize,
    seed: u64,
    noise_sigma: f64,
    blob_amplitude: f64,
    uncertain_prob: f64,
}

impl Default for SynthRunConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        SynthRunConfig {
            n: 200,
            size: s.size,
            seed: 42,
            noise_sigma: s.noise_sigma,
            blob_amplitude: s.blob_amplitude,
            uncertain_prob: s.uncertain_prob,
        }
    }
}

pub fn run(args: SynthArgs) -> Result<i32> {
    let mut cfg = overlay_file(SynthRunConfig::default(), args.config.as_deref())?;
    cfg.seed = resolve_seed(args.seed, file_u64(args.config.as_deref(), "seed"));
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(size) = args.size {
        cfg.size = size;
    }
    if cfg.n == 0 {
        return Err(Error::Config("need at least one image".into()));
    }

    if args.out.exists() {
        let non_empty = std::fs::read_dir(&args.out)?.next().is_some();
        if non_empty && !args.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                args.out.display()
            )));
        }
    }

    let spec = SynthSpec {
        size: cfg.size,
        noise_sigma: cfg.noise_sigma,
        blob_amplitude: cfg.blob_amplitude,
        uncertain_prob: cfg.uncertain_prob,
        ..SynthSpec::default()
    };
    let (images, records) = synth_generate(cfg.n, cfg.seed, &spec);
    write_dataset(&args.out, &images, &records)?;
    write_resolved(&cfg, &args.out.join("synth_config.json"))?;
    println!(
        "wrote {} images and manifest.csv to {}",
        images.len(),
        args.out.display()
    );
    Ok(0)
}
