//! `cxrlab sweep`: the (model x fraction x fold) grid with CSV/JSON reports
//! and an SVG chart. Cell failures are recorded and the sweep continues,
//! exiting nonzero.

use std::path::PathBuf;

use clap::Args;
use cxrlab_core::data::splits::SplitConfig;
use cxrlab_core::data::UncertaintyPolicy;
use cxrlab_core::models::{Family, Model, ModelSpec};
use cxrlab_core::sweep::{run_sweep, SweepConfig};
use cxrlab_core::train::TrainConfig;
use cxrlab_core::{Error, Result};
use serde::{Deserialize, Serialize};

use super::{base_train_config, load_and_plan};
use crate::config::{file_u64, overlay_file, parse_list, resolve_seed, write_resolved};
use crate::svg::sweep_plot;

#[derive(Args)]
pub struct SweepArgs {
    /// Comma-separated model presets
    #[arg(long)]
    models: Option<String>,
    /// Manifest CSV or a directory containing manifest.csv
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
    /// Comma-separated training fractions (1.0 = full fold)
    #[arg(long)]
    fractions: Option<String>,
    /// Comma-separated 1-based fold numbers (default: all)
    #[arg(long)]
    folds: Option<String>,
    /// Parallel grid cells
    #[arg(long)]
    jobs: Option<usize>,
    /// Teacher checkpoint, applied to every distilling (deit) cell
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Paper-scale profile: batch 128, full augmentation
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct SweepRunConfig {
    models: Vec<String>,
    data: PathBuf,
    fractions: Vec<f64>,
    folds: Vec<usize>,
    jobs: usize,
    teacher: Option<PathBuf>,
    policy: String,
    split_seed: u64,
    num_classes: usize,
    paper_scale: bool,
    seed: u64,
    threshold: f64,
    train: TrainConfig,
}

impl Default for SweepRunConfig {
    fn default() -> Self {
        SweepRunConfig {
            models: vec!["vit-tiny".into(), "cnn-tiny".into()],
            data: PathBuf::from("data"),
            fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            folds: Vec::new(),
            jobs: 1,
            teacher: None,
            policy: "u_ones".into(),
            split_seed: 42,
            num_classes: 5,
            paper_scale: false,
            seed: 42,
            threshold: 0.5,
            train: base_train_config(Family::Vit, false),
        }
    }
}

pub fn run(args: SweepArgs) -> Result<i32> {
    let mut cfg = overlay_file(SweepRunConfig::default(), args.config.as_deref())?;
    cfg.seed = resolve_seed(args.seed, file_u64(args.config.as_deref(), "seed"));
    if let Some(m) = args.models {
        cfg.models = parse_list(&m, "models")?;
    }
    if let Some(d) = args.data {
        cfg.data = d;
    }
    if let Some(f) = args.fractions {
        cfg.fractions = parse_list(&f, "fractions")?;
    }
    if let Some(f) = args.folds {
        let one_based: Vec<usize> = parse_list(&f, "folds")?;
        cfg.folds = one_based
            .iter()
            .map(|&f| {
                if f == 0 {
                    Err(Error::Config("fold numbers are 1-based".into()))
                } else {
                    Ok(f - 1)
                }
            })
            .collect::<Result<_>>()?;
    }
    if let Some(j) = args.jobs {
        cfg.jobs = j.max(1);
    }
    if let Some(t) = args.teacher {
        cfg.teacher = Some(t);
    }
    if let Some(p) = args.policy {
        cfg.policy = p;
    }
    if let Some(s) = args.split_seed {
        cfg.split_seed = s;
    }
    if let Some(n) = args.num_classes {
        cfg.num_classes = n;
    }
    if args.paper_scale {
        cfg.paper_scale = true;
        cfg.train = base_train_config(Family::Vit, true);
    }
    if let Some(v) = args.epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = args.warmup_epochs {
        cfg.train.warmup_epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr_init = v;
    }
    if let Some(v) = args.patience {
        cfg.train.patience = v;
    }
    if let Some(v) = args.lambda {
        cfg.train.distill_lambda = v;
    }
    if let Some(v) = args.tau {
        cfg.train.distill_temperature = v;
    }
    cfg.train.validate()?;
    let policy = UncertaintyPolicy::parse(&cfg.policy)?;

    if cfg.fractions.iter().any(|&f| f <= 0.0 || f > 1.0) {
        return Err(Error::Config("fractions must lie in (0, 1]".into()));
    }
    let specs: Vec<ModelSpec> = cfg
        .models
        .iter()
        .map(|name| ModelSpec::preset(name, cfg.num_classes))
        .collect::<Result<_>>()?;
    let needs_teacher = specs
        .iter()
        .any(|s| s.family == Family::Deit && cfg.train.distill_lambda > 0.0);
    if needs_teacher && cfg.teacher.is_none() {
        return Err(Error::Config(
            "a deit model distills (lambda > 0) and the sweep needs --teacher".into(),
        ));
    }
    let teacher = match &cfg.teacher {
        Some(path) => Some(Model::load(path)?),
        None => None,
    };

    let (dataset, plan) =
        load_and_plan(&cfg.data, policy, cfg.split_seed, &SplitConfig::default())?;
    let sweep_cfg = SweepConfig {
        fractions: cfg.fractions.clone(),
        folds: cfg.folds.clone(),
        seed: cfg.seed,
        jobs: cfg.jobs,
        threshold: cfg.threshold,
    };
    let result = run_sweep(&dataset, &plan, &specs, &cfg.train, &sweep_cfg, teacher.as_ref())?;

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("grid.csv"), result.grid_csv())?;
    std::fs::write(args.out.join("summary.json"), result.summary_json()?)?;
    std::fs::write(args.out.join("plot.svg"), sweep_plot(&result.summaries))?;
    std::fs::write(args.out.join("plan.json"), plan.to_json()?)?;
    write_resolved(&cfg, &args.out.join("resolved_config.json"))?;

    for s in &result.summaries {
        println!(
            "{} f={:.2}: AUROC {:.4} +- {:.4}, F1 {:.4} +- {:.4} ({} folds)",
            s.model, s.fraction, s.mean_auroc, s.std_auroc, s.mean_f1, s.std_f1, s.folds
        );
    }
    let failed: Vec<&cxrlab_core::sweep::SweepCell> =
        result.cells.iter().filter(|c| c.error.is_some()).collect();
    for cell in &failed {
        eprintln!(
            "cell failed: {} f={:.2} fold {}: {}",
            cell.model,
            cell.fraction,
            cell.fold,
            cell.error.as_deref().unwrap_or("unknown")
        );
    }
    println!("outputs in {}", args.out.display());
    Ok(if failed.is_empty() { 0 } else { 2 })
}
