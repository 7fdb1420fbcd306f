//! Data-fraction sweep harness: train on nested subsets across folds,
//! evaluate on the shared test split, aggregate mean and std per
//! (model, fraction).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::splits::FoldPlan;
use crate::data::{LoadedDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_folds, MetricsReport};
use crate::models::{Family, ForwardOptions, Model, ModelSpec};
use crate::tensor::sigmoid;
use crate::train::{train, FoldData, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Fractions of each fold's training set; 1.0 means the full set.
    pub fractions: Vec<f64>,
    /// Fold indices to run (defaults to every fold in the plan).
    pub folds: Vec<usize>,
    pub seed: u64,
    /// Parallel worker threads over grid cells.
    pub jobs: usize,
    /// F1 decision threshold on sigmoid probabilities.
    pub threshold: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            folds: Vec::new(),
            seed: 42,
            jobs: 1,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub model: String,
    pub fraction: f64,
    pub fold: usize,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Mean and std across folds for one (model, fraction) point, with the
/// model's trainable parameter count alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub model: String,
    pub fraction: f64,
    pub folds: usize,
    pub mean_auroc: f64,
    pub std_auroc: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub summaries: Vec<SweepSummary>,
}

impl SweepResult {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.error.is_none())
    }

    /// One row per grid cell.
    pub fn grid_csv(&self) -> String {
        let mut out = String::from(
            "model,fraction,fold,weighted_auroc,weighted_f1,\
             auroc_1,auroc_2,auroc_3,auroc_4,auroc_5,\
             f1_1,f1_2,f1_3,f1_4,f1_5,\
             support_1,support_2,support_3,support_4,support_5,error\n",
        );
        for c in &self.cells {
            out.push_str(&format!("{},{},{},", c.model, c.fraction, c.fold));
            match &c.report {
                Some(r) => {
                    let wa = r.weighted_auroc.map(|v| format!("{v}")).unwrap_or("NA".into());
                    out.push_str(&format!("{wa},{},", r.weighted_f1));
                    for k in 0..NUM_CLASSES {
                        match r.per_class_auroc[k] {
                            Some(v) => out.push_str(&format!("{v},")),
                            None => out.push_str("NA,"),
                        }
                    }
                    for k in 0..NUM_CLASSES {
                        out.push_str(&format!("{},", r.per_class_f1[k]));
                    }
                    for k in 0..NUM_CLASSES {
                        out.push_str(&format!("{},", r.support[k]));
                    }
                    out.push('\n');
                }
                None => {
                    out.push_str(&",".repeat(17));
                    out.push_str(&format!("{}\n", c.error.as_deref().unwrap_or("unknown")));
                }
            }
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summaries)?)
    }
}

/// Sigmoid class probabilities for the given record ids (eval mode).
pub fn predict_probs(
    model: &Model,
    dataset: &LoadedDataset,
    ids: &[usize],
    batch_size: usize,
) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch_size.max(1)) {
        let mut images = Vec::with_capacity(chunk.len());
        for &id in chunk {
            images.push(crate::train::prepare_input(&dataset.images[id], model)?);
        }
        let fwd = model.forward(&images, ForwardOptions::default())?;
        for row in 0..chunk.len() {
            let mut probs = [0.0; NUM_CLASSES];
            for (k, p) in probs.iter_mut().enumerate() {
                *p = sigmoid(fwd.class_logits.at2(row, k));
            }
            out.push(probs);
        }
    }
    Ok(out)
}

fn cell_seed(seed: u64, model: &str, fraction: f64, fold: usize) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in model.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    let mut rng = crate::rng::Rng::derive(seed, &[h, (fraction * 1000.0).round() as u64, fold as u64]);
    rng.next_u64()
}

fn run_cell(
    dataset: &LoadedDataset,
    plan: &FoldPlan,
    spec: &ModelSpec,
    train_cfg: &TrainConfig,
    sweep_cfg: &SweepConfig,
    teacher: Option<&Model>,
    fraction: f64,
    fold: usize,
) -> Result<MetricsReport> {
    let train_ids = plan.train_subset(fold, fraction)?.to_vec();
    let val_ids = plan
        .folds
        .get(fold)
        .ok_or_else(|| Error::Config(format!("fold {fold} out of range")))?
        .val
        .clone();
    let seed = cell_seed(sweep_cfg.seed, &spec.name, fraction, fold);
    let mut model = Model::build(spec, seed)?;
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let distilling = spec.family == Family::Deit && cfg.distill_lambda > 0.0;
    let cell_teacher = if distilling {
        match teacher {
            Some(t) => Some(t),
            None => {
                return Err(Error::Contract(format!(
                    "model '{}' distills but the sweep has no teacher",
                    spec.name
                )))
            }
        }
    } else {
        None
    };
    let data = FoldData { dataset, train_ids, val_ids };
    train(&mut model, &data, &cfg, cell_teacher)?;
    let probs = predict_probs(&model, dataset, &plan.test, cfg.batch_size)?;
    let targets = dataset.targets_for(&plan.test);
    MetricsReport::compute(&spec.name, fold, fraction, &probs, &targets, sweep_cfg.threshold)
}

/// Run the full (model x fraction x fold) grid. Cell failures are recorded
/// and do not stop the sweep. Each cell is seeded from
/// (seed, model, fraction, fold), so results are independent of scheduling.
pub fn run_sweep(
    dataset: &LoadedDataset,
    plan: &FoldPlan,
    specs: &[ModelSpec],
    train_cfg: &TrainConfig,
    sweep_cfg: &SweepConfig,
    teacher: Option<&Model>,
) -> Result<SweepResult> {
    if specs.is_empty() {
        return Err(Error::Config("sweep needs at least one model spec".into()));
    }
    let folds: Vec<usize> = if sweep_cfg.folds.is_empty() {
        (0..plan.folds.len()).collect()
    } else {
        sweep_cfg.folds.clone()
    };
    let mut grid = Vec::new();
    for spec in specs {
        for &fraction in &sweep_cfg.fractions {
            for &fold in &folds {
                grid.push((spec, fraction, fold));
            }
        }
    }

    let cells: Vec<SweepCell> = if sweep_cfg.jobs <= 1 {
        grid.iter()
            .map(|(spec, fraction, fold)| {
                to_cell(
                    spec,
                    *fraction,
                    *fold,
                    run_cell(dataset, plan, spec, train_cfg, sweep_cfg, teacher, *fraction, *fold),
                )
            })
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; grid.len()]);
        std::thread::scope(|scope| {
            for _ in 0..sweep_cfg.jobs.min(grid.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= grid.len() {
                        break;
                    }
                    let (spec, fraction, fold) = grid[i];
                    let cell = to_cell(
                        spec,
                        fraction,
                        fold,
                        run_cell(dataset, plan, spec, train_cfg, sweep_cfg, teacher, fraction, fold),
                    );
                    results.lock().expect("sweep results lock")[i] = Some(cell);
                });
            }
        });
        results
            .into_inner()
            .expect("sweep results lock")
            .into_iter()
            .map(|c| c.expect("all cells computed"))
            .collect()
    };

    // aggregate per (model, fraction), in grid order
    let mut summaries = Vec::new();
    for spec in specs {
        for &fraction in &sweep_cfg.fractions {
            let aurocs: Vec<f64> = cells
                .iter()
                .filter(|c| c.model == spec.name && c.fraction == fraction)
                .filter_map(|c| c.report.as_ref().and_then(|r| r.weighted_auroc))
                .collect();
            let f1s: Vec<f64> = cells
                .iter()
                .filter(|c| c.model == spec.name && c.fraction == fraction)
                .filter_map(|c| c.report.as_ref().map(|r| r.weighted_f1))
                .collect();
            if aurocs.len() >= 2 && f1s.len() >= 2 {
                let (mean_auroc, std_auroc) = aggregate_folds(&aurocs)?;
                let (mean_f1, std_f1) = aggregate_folds(&f1s)?;
                summaries.push(SweepSummary {
                    model: spec.name.clone(),
                    fraction,
                    folds: aurocs.len(),
                    mean_auroc,
                    std_auroc,
                    mean_f1,
                    std_f1,
                    param_count: spec.parameter_count(),
                });
            }
        }
    }
    Ok(SweepResult { cells, summaries })
}

fn to_cell(spec: &ModelSpec, fraction: f64, fold: usize, r: Result<MetricsReport>) -> SweepCell {
    match r {
        Ok(report) => SweepCell {
            model: spec.name.clone(),
            fraction,
            fold,
            report: Some(report),
            error: None,
        },
        Err(e) => SweepCell {
            model: spec.name.clone(),
            fraction,
            fold,
            report: None,
            error: Some(e.to_string()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::splits::{plan_splits, SplitConfig};
    use crate::data::synth::{synth_generate, SynthSpec};
    use crate::data::{apply_policy, UncertaintyPolicy};

    fn dataset(n: usize, seed: u64) -> LoadedDataset {
        let (images, mut records) = synth_generate(n, seed, &SynthSpec::default());
        apply_policy(&mut records, UncertaintyPolicy::UOnes);
        LoadedDataset { records, images }
    }

    #[test]
    fn grid_cardinality_and_summary_recomputation() {
        let ds = dataset(48, 3);
        let plan = plan_splits(&ds.records, 7, &SplitConfig { folds: 2, ..Default::default() })
            .unwrap();
        let spec = ModelSpec::preset("vit-tiny", 5).unwrap();
        let train_cfg = TrainConfig {
            max_epochs: 2,
            warmup_epochs: 1,
            batch_size: 16,
            ..TrainConfig::for_family(Family::Vit)
        };
        let sweep_cfg = SweepConfig {
            fractions: vec![0.5],
            folds: vec![],
            seed: 5,
            jobs: 1,
            threshold: 0.5,
        };
        let result =
            run_sweep(&ds, &plan, std::slice::from_ref(&spec), &train_cfg, &sweep_cfg, None)
                .unwrap();
        assert_eq!(result.cells.len(), 2, "1 model x 1 fraction x 2 folds");
        assert!(result.all_ok(), "{:?}", result.cells.iter().filter_map(|c| c.error.clone()).collect::<Vec<_>>());
        assert_eq!(result.summaries.len(), 1);

        // recomputation oracle: summary equals aggregate over the grid
        let vals: Vec<f64> = result
            .cells
            .iter()
            .filter_map(|c| c.report.as_ref().and_then(|r| r.weighted_auroc))
            .collect();
        let (mean, std) = aggregate_folds(&vals).unwrap();
        assert_eq!(result.summaries[0].mean_auroc, mean);
        assert_eq!(result.summaries[0].std_auroc, std);
        assert_eq!(result.summaries[0].param_count, spec.parameter_count());

        let csv = result.grid_csv();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn parallel_jobs_match_sequential() {
        let ds = dataset(40, 11);
        let plan = plan_splits(&ds.records, 2, &SplitConfig { folds: 2, ..Default::default() })
            .unwrap();
        let spec = ModelSpec::preset("cnn-tiny", 5).unwrap();
        let train_cfg = TrainConfig {
            max_epochs: 2,
            warmup_epochs: 1,
            batch_size: 16,
            ..TrainConfig::for_family(Family::Densenet)
        };
        let base = SweepConfig { fractions: vec![1.0], seed: 9, jobs: 1, ..Default::default() };
        let seq =
            run_sweep(&ds, &plan, std::slice::from_ref(&spec), &train_cfg, &base, None).unwrap();
        let par_cfg = SweepConfig { jobs: 4, ..base };
        let par =
            run_sweep(&ds, &plan, std::slice::from_ref(&spec), &train_cfg, &par_cfg, None)
                .unwrap();
        assert_eq!(seq.grid_csv(), par.grid_csv());
        assert_eq!(seq.summary_json().unwrap(), par.summary_json().unwrap());
    }

    #[test]
    fn predict_probs_are_probabilities() {
        let ds = dataset(10, 21);
        let model = Model::build(&ModelSpec::preset("cnn-tiny", 5).unwrap(), 4).unwrap();
        let ids: Vec<usize> = (0..10).collect();
        let probs = predict_probs(&model, &ds, &ids, 4).unwrap();
        assert_eq!(probs.len(), 10);
        assert!(probs.iter().flatten().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
