//! Calibration harness for the heavier test scenarios. Not part of the test
//! suite; run manually, e.g.
//!   cargo run --example calibrate -- e2e 2500 30 0.0005

use cxrlab_core::data::augment::AugmentConfig;
use cxrlab_core::data::splits::{plan_splits, SplitConfig};
use cxrlab_core::data::synth::{synth_generate, SynthSpec};
use cxrlab_core::data::{apply_policy, LoadedDataset, UncertaintyPolicy};
use cxrlab_core::metrics::MetricsReport;
use cxrlab_core::models::{Family, Model, ModelSpec};
use cxrlab_core::sweep::{predict_probs, run_sweep, SweepConfig};
use cxrlab_core::testkit::LogisticOracle;
use cxrlab_core::train::{train, FoldData, TrainConfig};

fn synth_dataset(n: usize, seed: u64) -> LoadedDataset {
    let (images, mut records) = synth_generate(n, seed, &SynthSpec::default());
    apply_policy(&mut records, UncertaintyPolicy::UOnes);
    LoadedDataset { records, images }
}

fn synth_augment() -> AugmentConfig {
    AugmentConfig {
        ops_per_image: 1,
        flip_prob: 0.0,
        rotate_max_deg: 5.0,
        intensity_jitter: 0.1,
        erase_prob: 0.1,
        erase_area: (0.02, 0.1),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("e2e");
    match mode {
        "e2e" => {
            let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2500);
            let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(25);
            let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5e-4);
            e2e(n, epochs, lr);
        }
        "distill" => {
            let lambda: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10.0);
            distill(lambda);
        }
        "trend" => trend(),
        "saliency" => saliency_localization(),
        other => eprintln!("unknown mode {other}"),
    }
}

/// Replicates the acceptance fixtures exactly: a cnn-tiny teacher trained
/// for 24 epochs on the 1200-image corpus and the 12-epoch e2e vit-tiny on
/// the 2500-image corpus; measures grad-cam / attention localization rates.
fn saliency_localization() {
    use cxrlab_core::data::synth::region_rect;
    use cxrlab_core::saliency::{attention_map_for, grad_cam};

    let t0 = std::time::Instant::now();

    // ---- teacher (distill fixture, longer schedule) ----
    let ds = synth_dataset(1200, 77);
    let plan = plan_splits(&ds.records, 3, &SplitConfig::default()).unwrap();
    let fold = &plan.folds[0];
    let mut teacher = Model::build(&ModelSpec::preset("cnn-tiny", 5).unwrap(), 21).unwrap();
    let tcfg = TrainConfig {
        lr_init: 1e-3,
        max_epochs: 24,
        warmup_epochs: 1,
        batch_size: 32,
        patience: 24,
        seed: 5,
        augment: synth_augment(),
        ..TrainConfig::for_family(Family::Densenet)
    };
    let data =
        FoldData { dataset: &ds, train_ids: fold.train.clone(), val_ids: fold.val.clone() };
    train(&mut teacher, &data, &tcfg, None).unwrap();
    let tprobs = predict_probs(&teacher, &ds, &plan.test, 32).unwrap();
    let ttargets = ds.targets_for(&plan.test);
    let treport = MetricsReport::compute("cnn-tiny", 0, 1.0, &tprobs, &ttargets, 0.5).unwrap();
    println!(
        "teacher(24ep): AUROC {:.4} F1 {:.4} ({:?})",
        treport.weighted_auroc.unwrap(),
        treport.weighted_f1,
        t0.elapsed()
    );

    let measure = |name: &str, mapper: &dyn Fn(usize, usize) -> Vec<f64>, probs: &[[f64; 5]], targets: &[[f64; 5]], test: &[usize], size: usize| {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (row, &id) in test.iter().enumerate() {
            for k in 0..5 {
                if targets[row][k] != 1.0 || probs[row][k] < 0.5 {
                    continue;
                }
                let pixels = mapper(id, k);
                let global: f64 = pixels.iter().sum::<f64>() / pixels.len() as f64;
                let (y0, y1, x0, x1) = region_rect(k, size, size);
                let mut inside = 0.0;
                let mut n_in = 0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        inside += pixels[y * size + x];
                        n_in += 1;
                    }
                }
                total += 1;
                if inside / n_in as f64 > global {
                    hits += 1;
                }
            }
        }
        println!(
            "{name}: {hits}/{total} = {:.1}%",
            100.0 * hits as f64 / total.max(1) as f64
        );
    };

    let cam = |id: usize, k: usize| grad_cam(&teacher, &ds.images[id], k).unwrap().values.pixels;
    measure("grad_cam on teacher", &cam, &tprobs, &ttargets, &plan.test, 32);

    // ---- e2e vit (same as the e2e fixture) ----
    let ds2 = synth_dataset(2500, 2024);
    let plan2 = plan_splits(&ds2.records, 7, &SplitConfig::default()).unwrap();
    let fold2 = &plan2.folds[0];
    let mut vit = Model::build(&ModelSpec::preset("vit-tiny", 5).unwrap(), 11).unwrap();
    let vcfg = TrainConfig {
        lr_init: 5e-4,
        max_epochs: 12,
        warmup_epochs: 2,
        batch_size: 32,
        patience: 8,
        seed: 31,
        augment: synth_augment(),
        ..TrainConfig::for_family(Family::Vit)
    };
    let data2 =
        FoldData { dataset: &ds2, train_ids: fold2.train.clone(), val_ids: fold2.val.clone() };
    train(&mut vit, &data2, &vcfg, None).unwrap();
    let vprobs = predict_probs(&vit, &ds2, &plan2.test, 32).unwrap();
    let vtargets = ds2.targets_for(&plan2.test);
    let vreport = MetricsReport::compute("vit-tiny", 0, 1.0, &vprobs, &vtargets, 0.5).unwrap();
    println!(
        "vit(e2e): AUROC {:.4} F1 {:.4} ({:?})",
        vreport.weighted_auroc.unwrap(),
        vreport.weighted_f1,
        t0.elapsed()
    );
    let att = |id: usize, k: usize| {
        let _ = k; // attention maps are class-agnostic
        attention_map_for(&vit, &ds2.images[id]).unwrap().values.pixels
    };
    measure("attention on vit", &att, &vprobs, &vtargets, &plan2.test, 32);
    println!("total {:?}", t0.elapsed());
}

fn e2e(n: usize, epochs: usize, lr: f64) {
    let t0 = std::time::Instant::now();
    let ds = synth_dataset(n, 2024);
    let plan = plan_splits(&ds.records, 7, &SplitConfig::default()).unwrap();
    let fold = &plan.folds[0];
    println!(
        "n={n} train={} val={} test={}",
        fold.train.len(),
        fold.val.len(),
        plan.test.len()
    );

    let oracle = LogisticOracle::fit(&ds, &fold.train, 500, 2.0);
    let oracle_auroc = oracle.weighted_auroc(&ds, &plan.test).unwrap();
    println!("oracle weighted AUROC = {oracle_auroc:.4} ({:?})", t0.elapsed());

    let spec = ModelSpec::preset("vit-tiny", 5).unwrap();
    let mut model = Model::build(&spec, 11).unwrap();
    let cfg = TrainConfig {
        lr_init: lr,
        max_epochs: epochs,
        warmup_epochs: 2,
        batch_size: 32,
        patience: 8,
        seed: 31,
        augment: synth_augment(),
        ..TrainConfig::for_family(Family::Vit)
    };
    let data =
        FoldData { dataset: &ds, train_ids: fold.train.clone(), val_ids: fold.val.clone() };
    let history = train(&mut model, &data, &cfg, None).unwrap();
    for e in &history.epochs {
        println!("epoch {:2} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss);
    }
    let probs = predict_probs(&model, &ds, &plan.test, 32).unwrap();
    let targets = ds.targets_for(&plan.test);
    let report = MetricsReport::compute("vit-tiny", 0, 1.0, &probs, &targets, 0.5).unwrap();
    println!(
        "model weighted AUROC = {:.4} (oracle {:.4}, gap {:.4}) total {:?}",
        report.weighted_auroc.unwrap(),
        oracle_auroc,
        oracle_auroc - report.weighted_auroc.unwrap(),
        t0.elapsed()
    );
}

fn distill(lambda: f64) {
    let t0 = std::time::Instant::now();
    let ds = synth_dataset(1200, 77);
    let plan = plan_splits(&ds.records, 3, &SplitConfig::default()).unwrap();
    let fold = &plan.folds[0];

    let teacher_spec = ModelSpec::preset("cnn-tiny", 5).unwrap();
    let mut teacher = Model::build(&teacher_spec, 21).unwrap();
    let tcfg = TrainConfig {
        lr_init: 1e-3,
        max_epochs: 12,
        warmup_epochs: 1,
        batch_size: 32,
        patience: 12,
        seed: 5,
        augment: synth_augment(),
        ..TrainConfig::for_family(Family::Densenet)
    };
    let data =
        FoldData { dataset: &ds, train_ids: fold.train.clone(), val_ids: fold.val.clone() };
    let th = train(&mut teacher, &data, &tcfg, None).unwrap();
    let tprobs = predict_probs(&teacher, &ds, &plan.test, 32).unwrap();
    let ttargets = ds.targets_for(&plan.test);
    let treport = MetricsReport::compute("cnn-tiny", 0, 1.0, &tprobs, &ttargets, 0.5).unwrap();
    println!(
        "teacher: {} epochs, val {:.4}, test AUROC {:.4} ({:?})",
        th.epochs.len(),
        th.epochs.last().unwrap().val_loss,
        treport.weighted_auroc.unwrap(),
        t0.elapsed()
    );

    let spec = ModelSpec::preset("deit-tiny", 5).unwrap();
    let mut student = Model::build(&spec, 13).unwrap();
    let scfg = TrainConfig {
        lr_init: 5e-4,
        max_epochs: 20,
        warmup_epochs: 2,
        batch_size: 32,
        patience: 20,
        distill_lambda: lambda,
        distill_temperature: 1.0,
        seed: 6,
        augment: synth_augment(),
        ..TrainConfig::for_family(Family::Deit)
    };
    let history = train(&mut student, &data, &scfg, Some(&teacher)).unwrap();
    for e in &history.epochs {
        println!(
            "epoch {:2} train {:.4} val {:.4} bce {:.4} kl {:.5}",
            e.epoch, e.train_loss, e.val_loss, e.bce, e.kl
        );
    }
    let kl_first = history.epochs.first().unwrap().kl;
    let kl_last = history.epochs.last().unwrap().kl;
    println!("KL first {kl_first:.5} last {kl_last:.5} ratio {:.2}", kl_first / kl_last);

    // held-out teacher-vs-distillation-head probability agreement
    let teacher_probs = predict_probs(&teacher, &ds, &plan.test, 32).unwrap();
    let mut mad = 0.0;
    let mut count = 0usize;
    for (chunk_start, chunk) in plan.test.chunks(32).enumerate().map(|(i, c)| (i * 32, c)) {
        let images: Vec<_> = chunk
            .iter()
            .map(|&id| cxrlab_core::train::prepare_input(&ds.images[id], &student).unwrap())
            .collect();
        let out = student
            .forward(&images, cxrlab_core::models::ForwardOptions::default())
            .unwrap();
        let dist = out.dist_logits.unwrap();
        for row in 0..chunk.len() {
            for k in 0..5 {
                let sp = cxrlab_core::tensor::sigmoid(dist.at2(row, k));
                mad += (sp - teacher_probs[chunk_start + row][k]).abs();
                count += 1;
            }
        }
    }
    println!("teacher-student prob MAD = {:.4} ({:?})", mad / count as f64, t0.elapsed());
}

fn trend() {
    let t0 = std::time::Instant::now();
    let ds = synth_dataset(700, 55);
    let plan = plan_splits(&ds.records, 9, &SplitConfig::default()).unwrap();
    let specs =
        vec![ModelSpec::preset("vit-tiny", 5).unwrap(), ModelSpec::preset("cnn-tiny", 5).unwrap()];
    let train_cfg = TrainConfig {
        lr_init: 5e-4,
        max_epochs: 8,
        warmup_epochs: 1,
        batch_size: 32,
        patience: 8,
        augment: synth_augment(),
        ..TrainConfig::default()
    };
    let sweep_cfg = SweepConfig {
        fractions: vec![0.1, 0.9],
        folds: vec![],
        seed: 3,
        jobs: 4,
        threshold: 0.5,
    };
    let result = run_sweep(&ds, &plan, &specs, &train_cfg, &sweep_cfg, None).unwrap();
    for s in &result.summaries {
        println!(
            "{} f={:.1}: AUROC {:.4} +- {:.4} (F1 {:.4})",
            s.model, s.fraction, s.mean_auroc, s.std_auroc, s.mean_f1
        );
    }
    println!("cells ok: {} ({:?})", result.all_ok(), t0.elapsed());
}
