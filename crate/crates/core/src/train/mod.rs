//! Training: configuration, the epoch loop with seeded shuffling and
//! augmentation, patience-based early stopping with best-checkpoint
//! restoration, and history export.

pub mod loss;
pub mod optim;
pub mod schedule;

pub use loss::{class_weights, class_weights_capped, distill_kl, total_loss, weighted_bce};
pub use optim::{adamw_step, AdamState};
pub use schedule::lr_at;

use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, resize, AugmentConfig};
use crate::data::{GrayImage, LoadedDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::models::{Family, ForwardOptions, Model};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Epochs without val-loss improvement before stopping.
    pub patience: usize,
    pub distill_lambda: f64,
    pub distill_temperature: f64,
    /// Cap for inverse-frequency class weights (applies when a class has no
    /// positives in the training subset).
    pub max_class_weight: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            max_epochs: 50,
            warmup_epochs: 2,
            batch_size: 32,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 5,
            distill_lambda: 1.0,
            distill_temperature: 1.0,
            max_class_weight: 100.0,
            bn_momentum: 0.1,
            seed: 42,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Family defaults: CNNs train at lr 1e-4 (wd 1e-4), transformers at
    /// lr 5e-5 (wd 0.05).
    pub fn for_family(family: Family) -> TrainConfig {
        match family {
            Family::Densenet => TrainConfig::default(),
            Family::Vit | Family::Deit => {
                TrainConfig { lr_init: 5e-5, weight_decay: 0.05, ..TrainConfig::default() }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_init <= 0.0 {
            return Err(Error::Config(format!("lr_init must be > 0, got {}", self.lr_init)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.warmup_epochs >= self.max_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be < max_epochs {}",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if self.distill_temperature <= 0.0 {
            return Err(Error::Config("distill_temperature must be > 0".into()));
        }
        if self.distill_lambda < 0.0 {
            return Err(Error::Config("distill_lambda must be >= 0".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean weighted-BCE component of the train loss.
    pub bce: f64,
    /// Mean raw (unscaled) KL component; 0 when not distilling.
    pub kl: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub steps_per_epoch: usize,
}

impl TrainHistory {
    /// CSV with shortest-roundtrip float formatting, so parsed values are
    /// bit-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,bce,kl,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.bce, e.kl, e.lr
            ));
        }
        out
    }
}

/// Patience-based early stopping on strict val-loss improvement.
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    pub best_epoch: usize,
    fails: usize,
}

pub struct Observation {
    pub improved: bool,
    pub should_stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper { patience, best: None, best_epoch: 0, fails: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Observation {
        let improved = match self.best {
            None => true,
            Some(best) => val_loss < best,
        };
        if improved {
            self.best = Some(val_loss);
            self.best_epoch = epoch;
            self.fails = 0;
        } else {
            self.fails += 1;
        }
        Observation { improved, should_stop: self.fails >= self.patience }
    }
}

/// One fold's view of a loaded dataset.
pub struct FoldData<'a> {
    pub dataset: &'a LoadedDataset,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// Resize (if needed) and channel-replicate an image into the model's
/// expected [C, H, W] input.
pub fn prepare_input(img: &GrayImage, model: &Model) -> Result<Tensor> {
    let (c, h, w) = model.spec().input;
    if img.height == h && img.width == w {
        return Ok(img.to_model_input(c));
    }
    if h != w {
        return Err(Error::Config(format!(
            "cannot resize {}x{} image to non-square input {h}x{w}",
            img.height, img.width
        )));
    }
    Ok(resize(img, h)?.to_model_input(c))
}

fn batch_targets(dataset: &LoadedDataset, ids: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(ids.len() * NUM_CLASSES);
    for &id in ids {
        data.extend_from_slice(&dataset.records[id].targets());
    }
    Tensor::new(vec![ids.len(), NUM_CLASSES], data).expect("target shape")
}

/// Train `model` on one fold. Mini-batch order, augmentation and everything
/// else derive from `cfg.seed`, so two runs with identical inputs produce
/// identical histories. Early stopping restores the best-val-loss
/// checkpoint. A teacher must be given exactly when the model is a DeiT and
/// distill_lambda > 0; it is frozen and consumes the same augmented batches.
pub fn train(
    model: &mut Model,
    data: &FoldData,
    cfg: &TrainConfig,
    teacher: Option<&Model>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let distilling = model.spec().family == Family::Deit && cfg.distill_lambda > 0.0;
    if distilling && teacher.is_none() {
        return Err(Error::Contract(
            "distillation (deit family, lambda > 0) requires a frozen teacher".into(),
        ));
    }
    if !distilling && teacher.is_some() {
        return Err(Error::Contract(
            "teacher given but the model does not distill (not a deit or lambda = 0)".into(),
        ));
    }
    if let Some(t) = teacher {
        if t.spec().input != model.spec().input {
            return Err(Error::Contract(format!(
                "teacher input {:?} does not match student input {:?}",
                t.spec().input,
                model.spec().input
            )));
        }
    }
    if data.train_ids.is_empty() || data.val_ids.is_empty() {
        return Err(Error::Contract("train and val splits must be non-empty".into()));
    }

    let train_targets = data.dataset.targets_for(&data.train_ids);
    let weights = class_weights_capped(&train_targets, cfg.max_class_weight);
    let spe = data.train_ids.len().div_ceil(cfg.batch_size);

    let mut adam = AdamState::new(&model.named_params());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: Option<Model> = None;
    let mut epochs = Vec::new();
    let mut global_step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order = data.train_ids.clone();
        Rng::derive(cfg.seed, &[0x0DE8, epoch as u64]).shuffle(&mut order);

        let mut sum_loss = 0.0;
        let mut sum_bce = 0.0;
        let mut sum_kl = 0.0;
        let lr_epoch = lr_at((epoch - 1) * spe, spe, cfg);

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            for &id in chunk {
                let mut aug_rng = Rng::derive(cfg.seed, &[0xA6, epoch as u64, id as u64]);
                let img = augment(&data.dataset.images[id], &cfg.augment, &mut aug_rng);
                images.push(prepare_input(&img, model)?);
            }
            let targets = batch_targets(data.dataset, chunk);
            let teacher_logits = match teacher {
                Some(t) => {
                    Some(t.forward(&images, ForwardOptions::default())?.class_logits)
                }
                None => None,
            };

            let mut tape = Tape::new();
            let traced = model.forward_traced(
                &mut tape,
                &images,
                ForwardOptions { train: true, ..Default::default() },
            )?;
            let dist = if distilling { traced.dist_logits } else { None };
            let parts = total_loss(
                &mut tape,
                traced.class_logits,
                dist,
                &targets,
                teacher_logits.as_ref(),
                &weights,
                cfg.distill_lambda,
                cfg.distill_temperature,
            )?;
            let loss_val = tape.value(parts.total).item();
            if !loss_val.is_finite() {
                return Err(Error::TrainAbort {
                    batch: batch_idx,
                    msg: format!("non-finite loss {loss_val} in epoch {epoch}"),
                });
            }
            sum_loss += loss_val * chunk.len() as f64;
            sum_bce += tape.value(parts.bce).item() * chunk.len() as f64;
            if let Some(kl) = parts.kl {
                sum_kl += tape.value(kl).item() * chunk.len() as f64;
            }

            tape.backward(parts.total)?;
            let grads: Vec<Vec<f64>> = traced
                .param_vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
                })
                .collect();
            let lr = lr_at(global_step, spe, cfg);
            adamw_step(
                &mut model.named_params_mut(),
                &grads,
                &mut adam,
                global_step as u64 + 1,
                lr,
                cfg,
            );
            model.update_running_stats(&tape, &traced, cfg.bn_momentum);
            global_step += 1;
        }

        let n_train = data.train_ids.len() as f64;
        let val_loss = evaluate_loss(model, data, cfg, teacher, &weights, distilling)?;
        if !val_loss.is_finite() {
            return Err(Error::TrainAbort {
                batch: 0,
                msg: format!("non-finite validation loss in epoch {epoch}"),
            });
        }
        epochs.push(EpochStats {
            epoch,
            train_loss: sum_loss / n_train,
            val_loss,
            bce: sum_bce / n_train,
            kl: sum_kl / n_train,
            lr: lr_epoch,
        });

        let obs = stopper.observe(epoch, val_loss);
        if obs.improved {
            best = Some(model.clone());
        }
        if obs.should_stop {
            break;
        }
    }

    if let Some(b) = best {
        *model = b;
    }
    Ok(TrainHistory {
        stopped_epoch: epochs.last().map(|e| e.epoch).unwrap_or(0),
        best_epoch: stopper.best_epoch,
        steps_per_epoch: spe,
        epochs,
    })
}

/// Mean total loss over a split, eval mode, no augmentation.
fn evaluate_loss(
    model: &Model,
    data: &FoldData,
    cfg: &TrainConfig,
    teacher: Option<&Model>,
    weights: &[f64; NUM_CLASSES],
    distilling: bool,
) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in data.val_ids.chunks(cfg.batch_size) {
        let mut images = Vec::with_capacity(chunk.len());
        for &id in chunk {
            images.push(prepare_input(&data.dataset.images[id], model)?);
        }
        let targets = batch_targets(data.dataset, chunk);
        let teacher_logits = match teacher {
            Some(t) => Some(t.forward(&images, ForwardOptions::default())?.class_logits),
            None => None,
        };
        let mut tape = Tape::new();
        let traced = model.forward_traced(&mut tape, &images, ForwardOptions::default())?;
        let dist = if distilling { traced.dist_logits } else { None };
        let parts = total_loss(
            &mut tape,
            traced.class_logits,
            dist,
            &targets,
            teacher_logits.as_ref(),
            weights,
            cfg.distill_lambda,
            cfg.distill_temperature,
        )?;
        sum += tape.value(parts.total).item() * chunk.len() as f64;
    }
    Ok(sum / data.val_ids.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthSpec};
    use crate::data::{apply_policy, UncertaintyPolicy};
    use crate::models::ModelSpec;

    #[test]
    fn stopper_patience_one_stops_on_second_worsening_epoch() {
        let mut s = EarlyStopper::new(1);
        let first = s.observe(1, 1.0);
        assert!(first.improved && !first.should_stop);
        let second = s.observe(2, 1.1);
        assert!(!second.improved && second.should_stop, "stops at epoch 2");
        assert_eq!(s.best_epoch, 1);

        // recovery resets the counter
        let mut s = EarlyStopper::new(2);
        s.observe(1, 1.0);
        s.observe(2, 1.2);
        let third = s.observe(3, 0.9);
        assert!(third.improved && !third.should_stop);
        assert_eq!(s.best_epoch, 3);
    }

    fn small_dataset(n: usize, seed: u64) -> LoadedDataset {
        let (images, mut records) = synth_generate(n, seed, &SynthSpec::default());
        apply_policy(&mut records, UncertaintyPolicy::UOnes);
        LoadedDataset { records, images }
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: 3,
            warmup_epochs: 1,
            batch_size: 8,
            patience: 5,
            seed,
            ..TrainConfig::for_family(Family::Vit)
        }
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = small_dataset(24, 5);
        let data = FoldData {
            dataset: &dataset,
            train_ids: (0..18).collect(),
            val_ids: (18..24).collect(),
        };
        let spec = ModelSpec::preset("vit-tiny", 5).unwrap();
        let cfg = quick_cfg(9);

        let mut m1 = Model::build(&spec, 11).unwrap();
        let h1 = train(&mut m1, &data, &cfg, None).unwrap();
        let mut m2 = Model::build(&spec, 11).unwrap();
        let h2 = train(&mut m2, &data, &cfg, None).unwrap();
        assert_eq!(h1.to_csv(), h2.to_csv());
        for ((_, a), (_, b)) in m1.named_params().iter().zip(m2.named_params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn history_lr_column_matches_schedule() {
        let dataset = small_dataset(20, 6);
        let data = FoldData {
            dataset: &dataset,
            train_ids: (0..16).collect(),
            val_ids: (16..20).collect(),
        };
        let spec = ModelSpec::preset("vit-tiny", 5).unwrap();
        let cfg = quick_cfg(3);
        let mut model = Model::build(&spec, 2).unwrap();
        let history = train(&mut model, &data, &cfg, None).unwrap();
        assert_eq!(history.steps_per_epoch, 2);
        for e in &history.epochs {
            assert_eq!(e.lr, lr_at((e.epoch - 1) * 2, 2, &cfg));
        }
    }

    #[test]
    fn nan_input_aborts_with_batch_index() {
        let mut dataset = small_dataset(12, 7);
        dataset.images[0].pixels[0] = f64::NAN;
        let data = FoldData {
            dataset: &dataset,
            train_ids: (0..8).collect(),
            val_ids: (8..12).collect(),
        };
        let spec = ModelSpec::preset("vit-tiny", 5).unwrap();
        let cfg = TrainConfig { batch_size: 32, ..quick_cfg(1) };
        let mut model = Model::build(&spec, 2).unwrap();
        match train(&mut model, &data, &cfg, None) {
            Err(Error::TrainAbort { batch, .. }) => assert_eq!(batch, 0),
            other => panic!("expected TrainAbort, got {:?}", other.map(|_| ()).err()),
        }
    }

    #[test]
    fn teacher_contract_enforced_before_compute() {
        let dataset = small_dataset(12, 8);
        let data = FoldData {
            dataset: &dataset,
            train_ids: (0..8).collect(),
            val_ids: (8..12).collect(),
        };
        let deit = ModelSpec::preset("deit-tiny", 5).unwrap();
        let cfg = quick_cfg(2);
        let mut model = Model::build(&deit, 1).unwrap();
        assert!(matches!(train(&mut model, &data, &cfg, None), Err(Error::Contract(_))));

        // teacher for a plain vit is also a contract error
        let vit = ModelSpec::preset("vit-tiny", 5).unwrap();
        let teacher = Model::build(&ModelSpec::preset("cnn-tiny", 5).unwrap(), 1).unwrap();
        let mut model = Model::build(&vit, 1).unwrap();
        assert!(matches!(
            train(&mut model, &data, &cfg, Some(&teacher)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn early_stopping_restores_best_checkpoint() {
        let dataset = small_dataset(30, 9);
        let data = FoldData {
            dataset: &dataset,
            train_ids: (0..24).collect(),
            val_ids: (24..30).collect(),
        };
        let spec = ModelSpec::preset("vit-tiny", 5).unwrap();
        // an absurd learning rate makes validation worsen quickly
        let cfg = TrainConfig {
            lr_init: 5.0,
            max_epochs: 6,
            warmup_epochs: 1,
            batch_size: 12,
            patience: 2,
            seed: 4,
            ..TrainConfig::for_family(Family::Vit)
        };
        let mut model = Model::build(&spec, 3).unwrap();
        let history = train(&mut model, &data, &cfg, None).unwrap();
        assert!(history.stopped_epoch <= cfg.max_epochs);
        assert_eq!(history.epochs.len(), history.stopped_epoch);
        assert!(history.best_epoch >= 1);
        let best_val = history.epochs[history.best_epoch - 1].val_loss;
        for e in &history.epochs {
            assert!(best_val <= e.val_loss + 1e-15);
        }
    }
}
