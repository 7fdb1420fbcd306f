//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values (run with --nocapture to see them).
//!
//! Full-scale AUROC/F1 numbers and absolute data-fraction curves require a
//! real radiograph corpus and ImageNet-pretrained weights; they are out of
//! scope here. In their place the suite checks the complete report schema
//! and the qualitative data-size trend on synthetic data (criterion 9),
//! plus every mechanism-level property (criteria 1-8).

use std::process::Command;
use std::sync::OnceLock;

use cxrlab_core::data::augment::AugmentConfig;
use cxrlab_core::data::splits::{plan_splits, FoldPlan, SplitConfig};
use cxrlab_core::data::synth::{region_rect, synth_generate, SynthSpec};
use cxrlab_core::data::{apply_policy, LoadedDataset, UncertaintyPolicy};
use cxrlab_core::metrics::{aggregate_folds, auroc, f1, weighted_average, MetricsReport};
use cxrlab_core::models::{Family, ForwardOptions, Model, ModelSpec};
use cxrlab_core::nn::{AttentionRecord, PatchEmbedConfig, TokenSet};
use cxrlab_core::rng::Rng;
use cxrlab_core::saliency::{attention_map, grad_cam};
use cxrlab_core::sweep::predict_probs;
use cxrlab_core::tensor::{sigmoid, Tensor};
use cxrlab_core::testkit::{auroc_bruteforce, run_full_gradcheck, LogisticOracle};
use cxrlab_core::train::{lr_at, train, FoldData, TrainConfig, TrainHistory};

fn synth_dataset(n: usize, seed: u64) -> LoadedDataset {
    let (images, mut records) = synth_generate(n, seed, &SynthSpec::default());
    apply_policy(&mut records, UncertaintyPolicy::UOnes);
    LoadedDataset { records, images }
}

/// Label-preserving augmentation for the location-coded synthetic patterns.
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

// ----------------------------------------------------------- fixtures

struct E2eFixture {
    dataset: LoadedDataset,
    plan: FoldPlan,
    model: Model,
    oracle_auroc: f64,
    model_auroc: f64,
}

fn e2e_fixture() -> &'static E2eFixture {
    static FIXTURE: OnceLock<E2eFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dataset = synth_dataset(2500, 2024);
        let plan = plan_splits(&dataset.records, 7, &SplitConfig::default()).unwrap();
        let fold = &plan.folds[0];

        let oracle = LogisticOracle::fit(&dataset, &fold.train, 500, 2.0);
        let oracle_auroc = oracle.weighted_auroc(&dataset, &plan.test).unwrap();

        let spec = ModelSpec::preset("vit-tiny", 5).unwrap();
        let mut model = Model::build(&spec, 11).unwrap();
        let cfg = TrainConfig {
            lr_init: 5e-4,
            max_epochs: 12,
            warmup_epochs: 2,
            batch_size: 32,
            patience: 8,
            seed: 31,
            augment: synth_augment(),
            ..TrainConfig::for_family(Family::Vit)
        };
        let data = FoldData {
            dataset: &dataset,
            train_ids: fold.train.clone(),
            val_ids: fold.val.clone(),
        };
        train(&mut model, &data, &cfg, None).unwrap();
        let probs = predict_probs(&model, &dataset, &plan.test, 32).unwrap();
        let targets = dataset.targets_for(&plan.test);
        let report =
            MetricsReport::compute("vit-tiny", 0, 1.0, &probs, &targets, 0.5).unwrap();
        let model_auroc = report.weighted_auroc.unwrap();
        E2eFixture { dataset, plan, model, oracle_auroc, model_auroc }
    })
}

struct DistillFixture {
    dataset: LoadedDataset,
    plan: FoldPlan,
    teacher: Model,
    student: Model,
    history: TrainHistory,
}

fn distill_fixture() -> &'static DistillFixture {
    static FIXTURE: OnceLock<DistillFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dataset = synth_dataset(1200, 77);
        let plan = plan_splits(&dataset.records, 3, &SplitConfig::default()).unwrap();
        let fold = &plan.folds[0];
        let data = FoldData {
            dataset: &dataset,
            train_ids: fold.train.clone(),
            val_ids: fold.val.clone(),
        };

        let mut teacher =
            Model::build(&ModelSpec::preset("cnn-tiny", 5).unwrap(), 21).unwrap();
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
        train(&mut teacher, &data, &tcfg, None).unwrap();

        let mut student =
            Model::build(&ModelSpec::preset("deit-tiny", 5).unwrap(), 13).unwrap();
        let scfg = TrainConfig {
            lr_init: 5e-4,
            max_epochs: 20,
            warmup_epochs: 2,
            batch_size: 32,
            patience: 20,
            distill_lambda: 10.0,
            distill_temperature: 1.0,
            seed: 6,
            augment: synth_augment(),
            ..TrainConfig::for_family(Family::Deit)
        };
        let history = train(&mut student, &data, &scfg, Some(&teacher)).unwrap();
        DistillFixture { dataset, plan, teacher, student, history }
    })
}

// ----------------------------------------------------------- criteria

#[test]
fn criterion_1_parameter_count_reproduction() {
    let expected = [
        ("densenet-121", 6.96),
        ("densenet-201", 18.10),
        ("vit-s", 21.67),
        ("vit-b", 85.80),
        ("deit-s", 21.67),
        ("deit-b", 85.81),
    ];
    let out = Command::new(env!("CARGO_BIN_EXE_cxrlab"))
        .args(["params", "--num-classes", "5"])
        .output()
        .expect("params runs");
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    for (name, reference) in expected {
        let line = stdout
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap_or_else(|| panic!("{name} missing from params output"));
        let cols: Vec<&str> = line.split_whitespace().collect();
        let count: f64 = cols[1].parse().expect("count column");
        let rel = (count / 1e6 - reference).abs() / reference;
        assert!(
            rel < 0.01,
            "{name}: {count} is {:.2}% from the reference {reference}M",
            rel * 100.0
        );
    }
    println!("PASS criterion 1: parameter counts match the reference architectures within 1%");
}

#[test]
fn criterion_2_gradient_correctness() {
    let report = run_full_gradcheck(0xFACADE);
    assert!(report.cases >= 100, "only {} cases", report.cases);
    assert!(
        report.passed(),
        "{} coordinate(s) failed, first: {:?}",
        report.failures.len(),
        report.failures.first()
    );
    println!(
        "PASS criterion 2: {} cases / {} coordinates, max relative error {:.3e} < 1e-4",
        report.cases, report.coordinates, report.worst
    );
}

#[test]
fn criterion_3_metric_oracle_equivalence() {
    // auroc vs brute-force pair counting, with ties
    let mut rng = Rng::new(555);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = 2 + rng.below(63);
        let scores: Vec<f64> = (0..n).map(|_| (rng.next_f64() * 6.0).round() / 6.0).collect();
        let mut labels: Vec<f64> =
            (0..n).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        labels[0] = 1.0;
        if n > 1 {
            labels[1] = 0.0;
        }
        let fast = auroc(&scores, &labels).unwrap();
        let brute = auroc_bruteforce(&scores, &labels);
        worst = worst.max((fast - brute).abs());
    }
    assert!(worst <= 1e-12, "auroc deviates from pair counting by {worst}");

    // f1 vs direct confusion-matrix formula
    for _ in 0..200 {
        let n = 3 + rng.below(40);
        let probs: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let labels: Vec<f64> =
            (0..n).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let (mut tp, mut fp, mut fun) = (0.0, 0.0, 0.0);
        for (&p, &l) in probs.iter().zip(&labels) {
            match (p >= 0.5, l == 1.0) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fun += 1.0,
                _ => {}
            }
        }
        let expect = if 2.0 * tp + fp + fun == 0.0 || tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fun)
        };
        assert!((f1(&probs, &labels, 0.5) - expect).abs() < 1e-12);
    }

    // weighted average vs direct sum
    for _ in 0..200 {
        let n = 2 + rng.below(5);
        let vals: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let sup: Vec<f64> = (0..n).map(|_| rng.range_f64(0.5, 20.0)).collect();
        let direct =
            vals.iter().zip(&sup).map(|(v, s)| v * s).sum::<f64>() / sup.iter().sum::<f64>();
        assert!((weighted_average(&vals, &sup).unwrap() - direct).abs() < 1e-12);
    }

    // fold aggregation vs hand-computed fixtures
    let (mean, std) = aggregate_folds(&[80.0, 82.0, 84.0, 81.0, 83.0]).unwrap();
    assert!((mean - 82.0).abs() < 1e-12 && (std - 2.5f64.sqrt()).abs() < 1e-12);
    let (mean, std) = aggregate_folds(&[0.5, 0.5]).unwrap();
    assert!((mean - 0.5).abs() < 1e-12 && std.abs() < 1e-12);

    println!("PASS criterion 3: auroc/f1/weighted-average/aggregation match their oracles");
}

#[test]
fn criterion_4_split_protocol_properties() {
    // 50-patient synthetic corpus with 1-3 images each
    let mut rng = Rng::new(404);
    let mut csv = String::from("image_path,patient_id,l1,l2,l3,l4,l5\n");
    let mut img = 0;
    for p in 0..50 {
        for _ in 0..1 + rng.below(3) {
            csv.push_str(&format!("images/i{img:04}.pgm,p{p:03},0,1,0,1,0\n"));
            img += 1;
        }
    }
    let records = cxrlab_core::data::parse_manifest(&csv).unwrap();
    let cfg = SplitConfig::default();
    let started = std::time::Instant::now();
    for seed in 0..1000u64 {
        let plan = plan_splits(&records, seed, &cfg).unwrap();
        let in_test: Vec<bool> = {
            let mut v = vec![false; records.len()];
            for &id in &plan.test {
                v[id] = true;
            }
            v
        };
        for fold in &plan.folds {
            // disjointness and full coverage of the pool
            let mut seen = vec![0u8; records.len()];
            for &id in &fold.train {
                seen[id] += 1;
                assert!(!in_test[id], "seed {seed}: train id in test");
            }
            for &id in &fold.val {
                seen[id] += 1;
                assert!(!in_test[id], "seed {seed}: val id in test");
            }
            for (id, &count) in seen.iter().enumerate() {
                if in_test[id] {
                    assert_eq!(count, 0, "seed {seed}");
                } else {
                    assert_eq!(count, 1, "seed {seed}: id {id} seen {count} times");
                }
            }
            // patient exclusivity across the train/val boundary
            let train_patients: std::collections::HashSet<&str> =
                fold.train.iter().map(|&id| records[id].patient_id.as_str()).collect();
            for &id in &fold.val {
                assert!(
                    !train_patients.contains(records[id].patient_id.as_str()),
                    "seed {seed}: patient straddles train/val"
                );
            }
            // nested fraction subsets with round(f * n) +- 1 sizes
            let n = fold.train.len() as f64;
            for (fi, f) in plan.fractions.iter().enumerate() {
                let subset = &fold.fraction_subsets[fi];
                let expect = (f * n).round() as i64;
                assert!(
                    (subset.len() as i64 - expect).abs() <= 1,
                    "seed {seed}: |subset({f})| = {} vs {expect}",
                    subset.len()
                );
                if fi > 0 {
                    let prev = &fold.fraction_subsets[fi - 1];
                    assert_eq!(&subset[..prev.len()], &prev[..], "seed {seed}: not nested");
                }
            }
        }
        // patient exclusivity across the test boundary
        let test_patients: std::collections::HashSet<&str> =
            plan.test.iter().map(|&id| records[id].patient_id.as_str()).collect();
        for (id, r) in records.iter().enumerate() {
            if !in_test[id] {
                assert!(!test_patients.contains(r.patient_id.as_str()), "seed {seed}");
            }
        }
    }
    println!(
        "PASS criterion 4: 1000 seeds satisfy disjointness/exclusivity/nestedness/sizes in {:?}",
        started.elapsed()
    );
}

#[test]
fn criterion_5_end_to_end_synthetic_learning() {
    let fx = e2e_fixture();
    assert!(
        fx.oracle_auroc >= 0.95,
        "region-mean logistic oracle must reach 0.95, got {}",
        fx.oracle_auroc
    );
    let gap = fx.oracle_auroc - fx.model_auroc;
    assert!(
        gap <= 0.05,
        "tiny ViT AUROC {} more than 0.05 below oracle {}",
        fx.model_auroc,
        fx.oracle_auroc
    );
    println!(
        "PASS criterion 5: tiny ViT weighted AUROC {:.4} vs oracle {:.4} (gap {:.4} <= 0.05)",
        fx.model_auroc, fx.oracle_auroc, gap
    );
}

#[test]
fn criterion_6_distillation_mechanism() {
    let fx = distill_fixture();
    let kl_first = fx.history.epochs.first().unwrap().kl;
    let kl_last = fx.history.epochs.last().unwrap().kl;
    assert!(
        kl_last * 5.0 <= kl_first,
        "KL fell only {:.2}x (first {kl_first}, last {kl_last})",
        kl_first / kl_last
    );

    // held-out agreement between the distillation head and the teacher
    let teacher_probs =
        predict_probs(&fx.teacher, &fx.dataset, &fx.plan.test, 32).unwrap();
    let mut mad = 0.0;
    let mut count = 0usize;
    for (offset, chunk) in fx.plan.test.chunks(32).enumerate().map(|(i, c)| (i * 32, c)) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|&id| cxrlab_core::train::prepare_input(&fx.dataset.images[id], &fx.student).unwrap())
            .collect();
        let out = fx.student.forward(&images, ForwardOptions::default()).unwrap();
        let dist = out.dist_logits.expect("deit distillation head");
        for row in 0..chunk.len() {
            for k in 0..5 {
                mad += (sigmoid(dist.at2(row, k)) - teacher_probs[offset + row][k]).abs();
                count += 1;
            }
        }
    }
    let mad = mad / count as f64;
    assert!(mad <= 0.05, "teacher-student probability MAD {mad} > 0.05");
    println!(
        "PASS criterion 6: KL {:.5} -> {:.5} ({:.1}x >= 5x), teacher-student MAD {:.4} <= 0.05",
        kl_first,
        kl_last,
        kl_first / kl_last,
        mad
    );
}

#[test]
fn criterion_7_schedule_anchors() {
    let cfg = TrainConfig {
        lr_init: 3e-4,
        max_epochs: 50,
        warmup_epochs: 2,
        ..TrainConfig::default()
    };
    let spe = 11;
    // last warmup step reaches lr_init exactly
    assert_eq!(lr_at(2 * spe - 1, spe, &cfg), cfg.lr_init);
    // integral cosine midpoint is exactly half
    let cfg_mid =
        TrainConfig { lr_init: 1.0, max_epochs: 13, warmup_epochs: 2, ..TrainConfig::default() };
    assert!((lr_at(7, 1, &cfg_mid) - 0.5).abs() < 1e-12);
    // final step decays below 1e-12 * lr_init
    let final_lr = lr_at(50 * spe - 1, spe, &cfg);
    assert!(final_lr < 1e-12 * cfg.lr_init, "final lr {final_lr}");
    println!(
        "PASS criterion 7: warmup end = lr_init, midpoint = lr_init/2, final lr {final_lr:.3e}"
    );
}

#[test]
fn criterion_8_saliency_properties() {
    // uniform attention -> constant map, rows normalized by construction
    let cfg = PatchEmbedConfig {
        image_h: 32,
        image_w: 32,
        channels: 3,
        patch: 8,
        embed_dim: 64,
        token_set: TokenSet::ClassOnly,
    };
    let t = cfg.seq_len();
    let uniform = AttentionRecord {
        weights: Tensor::full(&[4, t, t], 1.0 / t as f64),
    };
    uniform.validate(1e-6).unwrap();
    let map = attention_map(&uniform, &cfg).unwrap();
    let first = map.values.pixels[0];
    assert!(map.values.pixels.iter().all(|&v| (v - first).abs() < 1e-9));
    assert!(map.values.pixels.iter().all(|&v| v >= 0.0));

    // grad-cam nonnegativity on an untrained model
    let cnn = Model::build(&ModelSpec::preset("cnn-tiny", 5).unwrap(), 77).unwrap();
    let fx = distill_fixture();
    let img = &fx.dataset.images[fx.plan.test[0]];
    let cam = grad_cam(&cnn, img, 3).unwrap();
    assert!(cam.values.pixels.iter().all(|&v| v >= 0.0));

    // localization sanity on the trained teacher: among correctly
    // classified test positives, the mean class-conditional (grad-cam)
    // saliency inside the true region must beat the image-wide mean on at
    // least 70%
    let teacher_probs = predict_probs(&fx.teacher, &fx.dataset, &fx.plan.test, 32).unwrap();
    let targets = fx.dataset.targets_for(&fx.plan.test);
    let mut hits = 0usize;
    let mut total = 0usize;
    for (row, &id) in fx.plan.test.iter().enumerate() {
        for k in 0..5 {
            if targets[row][k] != 1.0 || teacher_probs[row][k] < 0.5 {
                continue;
            }
            let map = grad_cam(&fx.teacher, &fx.dataset.images[id], k).unwrap();
            total += 1;
            if region_beats_global(&map.values, k) {
                hits += 1;
            }
        }
    }
    assert!(total >= 50, "need a meaningful number of correct positives, got {total}");
    let rate = hits as f64 / total as f64;
    assert!(
        rate >= 0.70,
        "above-mean in-region saliency on only {:.1}% of {total} correct positives",
        rate * 100.0
    );

    // informative: the class-agnostic attention maps of the trained tiny
    // transformer, measured the same way (a single map serves all positive
    // classes of an image, so per-class region dominance is diluted)
    let e2e = e2e_fixture();
    let vit_probs = predict_probs(&e2e.model, &e2e.dataset, &e2e.plan.test, 32).unwrap();
    let vit_targets = e2e.dataset.targets_for(&e2e.plan.test);
    let mut att_hits = 0usize;
    let mut att_total = 0usize;
    for (row, &id) in e2e.plan.test.iter().enumerate() {
        let any_correct_positive =
            (0..5).any(|k| vit_targets[row][k] == 1.0 && vit_probs[row][k] >= 0.5);
        if !any_correct_positive {
            continue;
        }
        let map = cxrlab_core::saliency::attention_map_for(&e2e.model, &e2e.dataset.images[id])
            .unwrap();
        for k in 0..5 {
            if vit_targets[row][k] != 1.0 || vit_probs[row][k] < 0.5 {
                continue;
            }
            att_total += 1;
            if region_beats_global(&map.values, k) {
                att_hits += 1;
            }
        }
    }
    println!(
        "PASS criterion 8: uniform-attention constant map, nonnegative grad-cam, \
         grad-cam localization {hits}/{total} = {:.1}% >= 70% \
         (class-agnostic attention maps: {att_hits}/{att_total} = {:.1}%, informative)",
        rate * 100.0,
        100.0 * att_hits as f64 / att_total.max(1) as f64
    );
}

/// Mean saliency inside class k's pattern region beats the image-wide mean.
fn region_beats_global(map: &cxrlab_core::data::GrayImage, k: usize) -> bool {
    let global: f64 = map.pixels.iter().sum::<f64>() / map.pixels.len() as f64;
    let (y0, y1, x0, x1) = region_rect(k, map.height, map.width);
    let mut inside = 0.0;
    let mut count = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            inside += map.at(y, x);
            count += 1;
        }
    }
    inside / count as f64 > global
}

#[test]
fn criterion_9_sweep_schema_and_data_size_trend() {
    // Full-corpus accuracy values and absolute fraction curves are not
    // reproducible at desk scale (they need the real corpus and pretrained
    // weights); the harness instead emits the complete report schema on
    // synthetic data and must show the qualitative size trend.
    let dir = std::env::temp_dir().join(format!("cxrlab-accept-sweep-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    let data = dir.join("data");
    let out = dir.join("out");

    let run = |args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_cxrlab")).args(args).output().unwrap();
        assert!(
            o.status.success(),
            "stdout: {}\nstderr: {}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        );
    };
    run(&["synth", "--n", "700", "--seed", "55", "--out", data.to_str().unwrap()]);
    run(&[
        "sweep",
        "--models",
        "vit-tiny,cnn-tiny",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--fractions",
        "0.1,0.9",
        "--epochs",
        "8",
        "--warmup-epochs",
        "1",
        "--lr",
        "0.0005",
        "--batch-size",
        "32",
        "--split-seed",
        "9",
        "--seed",
        "3",
        "--jobs",
        "4",
    ]);

    // (a) complete report schema: grid rows for every cell, summary rows
    // with mean/std/param count per (model, fraction), and the chart
    let grid = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 2 * 2 * 5, "2 models x 2 fractions x 5 folds");
    let header = grid.lines().next().unwrap();
    for col in ["model", "fraction", "fold", "weighted_auroc", "weighted_f1", "support_5"] {
        assert!(header.contains(col), "grid schema missing {col}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let rows = summary.as_array().unwrap();
    assert_eq!(rows.len(), 4, "summary row per (model, fraction)");
    for row in rows {
        for key in ["model", "fraction", "mean_auroc", "std_auroc", "mean_f1", "std_f1", "param_count", "folds"] {
            assert!(row.get(key).is_some(), "summary schema missing {key}");
        }
        assert_eq!(row["folds"].as_u64().unwrap(), 5);
    }
    let svg = std::fs::read_to_string(out.join("plot.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2, "one polyline per model");

    // (b) qualitative trend: more data does not hurt, per model
    let mut lines = Vec::new();
    for model in ["vit-tiny", "cnn-tiny"] {
        let at = |frac: f64| -> f64 {
            rows.iter()
                .find(|r| r["model"] == model && (r["fraction"].as_f64().unwrap() - frac).abs() < 1e-9)
                .unwrap()["mean_auroc"]
                .as_f64()
                .unwrap()
        };
        let (lo, hi) = (at(0.1), at(0.9));
        assert!(
            hi >= lo,
            "{model}: AUROC at fraction 0.9 ({hi:.4}) fell below fraction 0.1 ({lo:.4})"
        );
        lines.push(format!("{model}: {lo:.4} -> {hi:.4}"));
    }
    std::fs::remove_dir_all(&dir).ok();
    println!(
        "PASS criterion 9: schema complete; mean AUROC rises with data ({}); \
         full-corpus absolute values remain out of desk-scale scope",
        lines.join("; ")
    );
}
