//! `cxrlab eval`: evaluate a checkpoint on the plan's test split.

use std::path::PathBuf;

use clap::Args;
use cxrlab_core::data::splits::SplitConfig;
use cxrlab_core::data::UncertaintyPolicy;
use cxrlab_core::metrics::MetricsReport;
use cxrlab_core::models::Model;
use cxrlab_core::sweep::predict_probs;
use cxrlab_core::Result;
use serde::{Deserialize, Serialize};

use super::load_and_plan;
use crate::config::{overlay_file, write_resolved};

#[derive(Args)]
pub struct EvalArgs {
    /// Model checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest CSV or a directory containing manifest.csv
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// F1 decision threshold on sigmoid probabilities
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct EvalRunConfig {
    checkpoint: PathBuf,
    data: PathBuf,
    policy: String,
    split_seed: u64,
    threshold: f64,
    batch_size: usize,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        EvalRunConfig {
            checkpoint: PathBuf::from("checkpoint.ckpt"),
            data: PathBuf::from("data"),
            policy: "u_ones".into(),
            split_seed: 42,
            threshold: 0.5,
            batch_size: 32,
        }
    }
}

pub fn run(args: EvalArgs) -> Result<i32> {
    let mut cfg = overlay_file(EvalRunConfig::default(), args.config.as_deref())?;
    cfg.checkpoint = args.checkpoint;
    if let Some(d) = args.data {
        cfg.data = d;
    }
    if let Some(p) = args.policy {
        cfg.policy = p;
    }
    if let Some(s) = args.split_seed {
        cfg.split_seed = s;
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    let policy = UncertaintyPolicy::parse(&cfg.policy)?;

    let model = Model::load(&cfg.checkpoint)?;
    let (dataset, plan) =
        load_and_plan(&cfg.data, policy, cfg.split_seed, &SplitConfig::default())?;
    let probs = predict_probs(&model, &dataset, &plan.test, cfg.batch_size)?;
    let targets = dataset.targets_for(&plan.test);
    let report = MetricsReport::compute(
        &model.spec().name,
        0,
        1.0,
        &probs,
        &targets,
        cfg.threshold,
    )?;

    std::fs::create_dir_all(&args.out)?;
    let csv = report.to_csv();
    std::fs::write(args.out.join("metrics.csv"), &csv)?;
    std::fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    write_resolved(&cfg, &args.out.join("resolved_config.json"))?;
    print!("{csv}");
    Ok(0)
}
