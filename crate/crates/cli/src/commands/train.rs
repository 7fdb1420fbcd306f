//! `cxrlab train`: train one model on one fold, writing a checkpoint, the
//! training history CSV and the resolved configuration.

use std::path::PathBuf;

use clap::Args;
use cxrlab_core::data::splits::SplitConfig;
use cxrlab_core::data::UncertaintyPolicy;
use cxrlab_core::models::{Family, Model, ModelSpec};
use cxrlab_core::train::{train, FoldData, TrainConfig};
use cxrlab_core::{Error, Result};
use serde::{Deserialize, Serialize};

use super::{base_train_config, fold_index, load_and_plan};
use crate::config::{file_u64, overlay_file, resolve_seed, write_resolved};

#[derive(Args)]
pub struct TrainArgs {
    /// Model preset (vit-tiny, deit-tiny, cnn-tiny, vit-s/b, deit-s/b,
    /// densenet-121/201)
    #[arg(long)]
    model: Option<String>,
    /// Manifest CSV or a directory containing manifest.csv
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Fold to train on (1-based)
    #[arg(long)]
    fold: Option<usize>,
    /// Uncertain-label policy: u_ones | u_zeros
    #[arg(long)]
    policy: Option<String>,
    /// Seed for the split plan (kept separate so eval sees the same test set)
    #[arg(long)]
    split_seed: Option<u64>,
    /// Teacher checkpoint (required for deit-* with lambda > 0)
    #[arg(long)]
    teacher: Option<PathBuf>,
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
    weight_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Distillation loss weight
    #[arg(long)]
    lambda: Option<f64>,
    /// Distillation temperature
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file (defaults < file < flags)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Clone)]
pub struct TrainRunConfig {
    pub model: String,
    pub data: PathBuf,
    pub fold: usize,
    pub policy: String,
    pub split_seed: u64,
    pub num_classes: usize,
    pub paper_scale: bool,
    pub teacher: Option<PathBuf>,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            model: "vit-tiny".into(),
            data: PathBuf::from("data"),
            fold: 1,
            policy: "u_ones".into(),
            split_seed: 42,
            num_classes: 5,
            paper_scale: false,
            teacher: None,
            seed: 42,
            train: base_train_config(Family::Vit, false),
        }
    }
}

pub fn run(args: TrainArgs) -> Result<i32> {
    let mut cfg = overlay_file(TrainRunConfig::default(), args.config.as_deref())?;
    if let Some(m) = args.model {
        cfg.model = m;
    }
    if let Some(d) = args.data {
        cfg.data = d;
    }
    if args.paper_scale {
        cfg.paper_scale = true;
    }
    cfg.seed = resolve_seed(args.seed, file_u64(args.config.as_deref(), "seed"));

    let spec = ModelSpec::preset(&cfg.model, args.num_classes.unwrap_or(cfg.num_classes))?;
    cfg.num_classes = spec.num_classes;
    // family defaults unless the config file already overrode them
    let file_had_train = args
        .config
        .as_deref()
        .and_then(|p| std::fs::read_to_string(p).ok())
        .map(|t| t.contains("\"train\""))
        .unwrap_or(false);
    if !file_had_train {
        cfg.train = base_train_config(spec.family, cfg.paper_scale);
    }
    if let Some(f) = args.fold {
        cfg.fold = f;
    }
    if let Some(p) = args.policy {
        cfg.policy = p;
    }
    if let Some(s) = args.split_seed {
        cfg.split_seed = s;
    }
    if let Some(t) = args.teacher {
        cfg.teacher = Some(t);
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
    if let Some(v) = args.weight_decay {
        cfg.train.weight_decay = v;
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
    cfg.train.seed = cfg.seed;
    cfg.train.validate()?;
    let policy = UncertaintyPolicy::parse(&cfg.policy)?;

    // usage errors before any compute
    let distilling = spec.family == Family::Deit && cfg.train.distill_lambda > 0.0;
    if distilling && cfg.teacher.is_none() {
        return Err(Error::Config(format!(
            "model '{}' distills (lambda = {}) and needs --teacher",
            cfg.model, cfg.train.distill_lambda
        )));
    }
    if !distilling && cfg.teacher.is_some() {
        return Err(Error::Config(
            "--teacher given but the model does not distill (not a deit or lambda = 0)".into(),
        ));
    }

    let teacher = match &cfg.teacher {
        Some(path) => Some(Model::load(path)?),
        None => None,
    };
    let (dataset, plan) =
        load_and_plan(&cfg.data, policy, cfg.split_seed, &SplitConfig::default())?;
    let fold = fold_index(cfg.fold, &plan)?;
    let data = FoldData {
        dataset: &dataset,
        train_ids: plan.folds[fold].train.clone(),
        val_ids: plan.folds[fold].val.clone(),
    };

    let mut model = Model::build(&spec, cfg.seed)?;
    let history = train(&mut model, &data, &cfg.train, teacher.as_ref())?;

    std::fs::create_dir_all(&args.out)?;
    let ckpt_path = args.out.join("checkpoint.ckpt");
    model.save(&ckpt_path)?;
    std::fs::write(args.out.join("history.csv"), history.to_csv())?;
    std::fs::write(args.out.join("plan.json"), plan.to_json()?)?;
    write_resolved(&cfg, &args.out.join("resolved_config.json"))?;

    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs (best epoch {}), final val loss {}",
        cfg.model, history.stopped_epoch, history.best_epoch, last.val_loss
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(0)
}
