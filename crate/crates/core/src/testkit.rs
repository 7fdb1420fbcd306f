//! Independent test oracles shared by the unit, integration and acceptance
//! suites: central-finite-difference gradient checking and a brute-force
//! O(n^2) AUROC pair counter.
//!
//! Finite differences at h = 1e-5 in f64 are the oracle for every backward
//! rule: the forward pass is evaluated twice per perturbed coordinate and
//! compared against the analytic gradient from the tape.

use crate::error::Result;
use crate::models::{Family, ForwardOptions, Model, ModelSpec};
use crate::rng::Rng;
use crate::tensor::{PoolKind, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Brute-force AUROC: count concordant (positive scored above negative)
/// pairs, ties at half weight, over all positive x negative pairs.
pub fn auroc_bruteforce(scores: &[f64], labels: &[f64]) -> f64 {
    let mut concordant = 0.0;
    let mut pairs = 0.0;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        if li != 1.0 {
            continue;
        }
        for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
            if i == j || lj != 0.0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                concordant += 1.0;
            } else if si == sj {
                concordant += 0.5;
            }
        }
    }
    concordant / pairs
}

/// Relative error with an absolute floor so near-zero gradients are compared
/// absolutely at 1e-6.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-2)
}

pub struct GradCheckReport {
    pub cases: usize,
    pub coordinates: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport { cases: 0, coordinates: 0, worst: 0.0, failures: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Check one case: `build` records a scalar loss from leaves made of
/// `inputs`; every input coordinate is finite-differenced.
pub fn check_case<F>(name: &str, inputs: &[Tensor], build: F, report: &mut GradCheckReport)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let loss = build(&mut tape, &vars).expect("gradcheck forward");
        tape.value(loss).item()
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut tape, &vars).expect("gradcheck forward");
    tape.backward(loss).expect("gradcheck backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    report.cases += 1;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let err = rel_err(analytic[i][j], fd);
            report.coordinates += 1;
            report.worst = report.worst.max(err);
            if err >= FD_TOLERANCE {
                report.failures.push(format!(
                    "{name}: input {i} coord {j}: analytic {:.6e}, fd {fd:.6e}, rel {err:.3e}",
                    analytic[i][j]
                ));
            }
        }
    }
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.range_f64(lo, hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Random tensor with coordinates kept away from zero (ReLU kink).
fn rand_tensor_away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.range_f64(0.05, 1.5);
            if rng.bernoulli(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Weighted-sum reduction so every output coordinate influences the loss.
fn weighted_sum(tape: &mut Tape, y: Var, rng: &mut Rng) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(rand_tensor(rng, &shape, -1.0, 1.0));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum_all(prod))
}

/// The full randomized sweep over every differentiable operation, plus
/// end-to-end micro transformer / CNN losses.
pub fn run_full_gradcheck(seed: u64) -> GradCheckReport {
    let mut report = GradCheckReport::new();
    let reps = 6;

    for rep in 0..reps {
        let mut rng = Rng::derive(seed, &[rep as u64]);
        let r = 1 + rng.below(4);
        let c = 1 + rng.below(4);

        // elementwise
        let xs = vec![rand_tensor(&mut rng, &[r, c], -2.0, 2.0), rand_tensor(&mut rng, &[r, c], -2.0, 2.0)];
        let wrng = Rng::derive(seed, &[rep as u64, 1]);
        check_case("add", &xs, |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);
        check_case("mul", &xs, |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        let bias_in = vec![rand_tensor(&mut rng, &[r, c], -2.0, 2.0), rand_tensor(&mut rng, &[c], -1.0, 1.0)];
        check_case("add_row", &bias_in, |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        let factor = rng.range_f64(-2.0, 2.0);
        let sc = vec![rand_tensor(&mut rng, &[r * c], -2.0, 2.0)];
        check_case("scale", &sc, |t, v| {
            let y = t.scale(v[0], factor);
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        // matmul / transpose
        let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let mm = vec![rand_tensor(&mut rng, &[m, k], -1.5, 1.5), rand_tensor(&mut rng, &[k, n], -1.5, 1.5)];
        check_case("matmul", &mm, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);
        let tr = vec![rand_tensor(&mut rng, &[m, k], -1.5, 1.5)];
        check_case("transpose", &tr, |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        // activations
        let act = vec![rand_tensor_away_from_zero(&mut rng, &[2, 3])];
        check_case("relu", &act, |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);
        check_case("gelu", &act, |t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        // softmax over a random axis of a rank-3 tensor
        let shape3 = [1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)];
        let axis = rng.below(3);
        let sm = vec![rand_tensor(&mut rng, &shape3, -2.0, 2.0)];
        check_case("softmax", &sm, |t, v| {
            let y = t.softmax(v[0], axis)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        // layer norm
        let d = 2 + rng.below(4);
        let ln = vec![
            rand_tensor(&mut rng, &[r, d], -2.0, 2.0),
            rand_tensor(&mut rng, &[d], 0.5, 1.5),
            rand_tensor(&mut rng, &[d], -0.5, 0.5),
        ];
        check_case("layer_norm", &ln, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        // conv2d and pools
        let (b, cc, h, w) = (1 + rng.below(2), 1 + rng.below(2), 4 + rng.below(3), 4 + rng.below(3));
        let f = 1 + rng.below(2);
        let ksz = if rng.bernoulli(0.5) { 1 } else { 3 };
        let stride = 1 + rng.below(2);
        let pad = rng.below(2);
        let conv = vec![
            rand_tensor(&mut rng, &[b, cc, h, w], -1.0, 1.0),
            rand_tensor(&mut rng, &[f, cc, ksz, ksz], -1.0, 1.0),
        ];
        check_case("conv2d", &conv, |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        let pool_in = vec![rand_tensor(&mut rng, &[b, cc, h, w], -1.0, 1.0)];
        check_case("max_pool", &pool_in, |t, v| {
            let y = t.pool(v[0], PoolKind::Max, 2, 2, 0)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);
        check_case("avg_pool", &pool_in, |t, v| {
            let y = t.pool(v[0], PoolKind::Avg, 3, 2, 1)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);
        check_case("global_avg_pool", &pool_in, |t, v| {
            let y = t.pool(v[0], PoolKind::GlobalAvg, 0, 1, 0)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        // batch norm, both modes (batch size >= 2 in train mode)
        let bn_in = vec![
            rand_tensor(&mut rng, &[2, cc, 3, 3], -1.5, 1.5),
            rand_tensor(&mut rng, &[cc], 0.5, 1.5),
            rand_tensor(&mut rng, &[cc], -0.5, 0.5),
        ];
        check_case("batch_norm_train", &bn_in, |t, v| {
            let y = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);
        let rm: Vec<f64> = (0..cc).map(|_| rng.range_f64(-0.5, 0.5)).collect();
        let rv: Vec<f64> = (0..cc).map(|_| rng.range_f64(0.5, 2.0)).collect();
        check_case("batch_norm_eval", &bn_in, |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        // structure ops
        let cat = vec![
            rand_tensor(&mut rng, &[2, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[1, 3], -1.0, 1.0),
        ];
        check_case("concat_rows_slice_cols", &cat, |t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            let y = t.slice_cols(y, 1, 2)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);
        let cat_c = vec![
            rand_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 6], -1.0, 1.0),
        ];
        check_case("concat_cols_slice_rows_reshape", &cat_c, |t, v| {
            let a = t.reshape(v[0], &[2, 6])?;
            let y = t.concat_cols(&[a, v[1]])?;
            let y = t.slice_rows(y, 0, 1)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);
        let chans = vec![
            rand_tensor(&mut rng, &[2, 2, 2, 2], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 1, 2, 2], -1.0, 1.0),
        ];
        check_case("concat_channels", &chans, |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);
        let img = vec![rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0)];
        check_case("patchify", &img, |t, v| {
            let y = t.patchify(v[0], 2)?;
            weighted_sum(t, y, &mut wrng.clone())
        }, &mut report);

        // losses
        let klass = 5;
        let bsz = 1 + rng.below(3);
        let logits = vec![rand_tensor(&mut rng, &[bsz, klass], -3.0, 3.0)];
        let targets = {
            let data: Vec<f64> = (0..bsz * klass).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
            Tensor::new(vec![bsz, klass], data).unwrap()
        };
        let weights: Vec<f64> = (0..klass).map(|_| rng.range_f64(0.2, 3.0)).collect();
        check_case("weighted_bce", &logits, |t, v| t.weighted_bce(v[0], &targets, &weights), &mut report);

        let teacher = rand_tensor(&mut rng, &[bsz, klass], 0.05, 0.95);
        let tau = [0.7, 1.0, 2.0][rng.below(3)];
        check_case("bernoulli_kl", &logits, |t, v| t.bernoulli_kl(v[0], &teacher, tau), &mut report);
    }

    end_to_end_micro_vit(seed, &mut report);
    end_to_end_micro_densenet(seed, &mut report);
    report
}

fn micro_vit_spec() -> ModelSpec {
    ModelSpec {
        name: "micro-deit".into(),
        family: Family::Deit,
        depth: 2,
        embed_dim: 8,
        heads: 2,
        mlp_ratio: 2,
        patch_size: 4,
        block_config: vec![],
        growth_rate: 0,
        init_features: 0,
        bn_size: 0,
        num_classes: 3,
        input: (3, 8, 8),
    }
}

fn micro_densenet_spec() -> ModelSpec {
    ModelSpec {
        name: "micro-cnn".into(),
        family: Family::Densenet,
        depth: 0,
        embed_dim: 0,
        heads: 0,
        mlp_ratio: 0,
        patch_size: 0,
        block_config: vec![1, 1],
        growth_rate: 2,
        init_features: 4,
        bn_size: 2,
        num_classes: 3,
        input: (3, 16, 16),
    }
}

/// Finite-difference a sample of parameter coordinates of a full model loss.
fn check_model_loss(
    name: &str,
    model: &Model,
    loss_of: impl Fn(&Model) -> f64,
    analytic_grads: &[Vec<f64>],
    coords: usize,
    seed: u64,
    report: &mut GradCheckReport,
) {
    let mut rng = Rng::derive(seed, &[0xE2E]);
    let param_count = model.named_params().len();
    report.cases += 1;
    for _ in 0..coords {
        let p = rng.below(param_count);
        let numel = model.named_params()[p].1.numel();
        let j = rng.below(numel);
        let mut up_model = model.clone();
        up_model.named_params_mut()[p].1.data_mut()[j] += FD_STEP;
        let up = loss_of(&up_model);
        let mut down_model = model.clone();
        down_model.named_params_mut()[p].1.data_mut()[j] -= FD_STEP;
        let down = loss_of(&down_model);
        let fd = (up - down) / (2.0 * FD_STEP);
        let err = rel_err(analytic_grads[p][j], fd);
        report.coordinates += 1;
        report.worst = report.worst.max(err);
        if err >= FD_TOLERANCE {
            report.failures.push(format!(
                "{name}: param {} coord {j}: analytic {:.6e}, fd {fd:.6e}, rel {err:.3e}",
                model.named_params()[p].0,
                analytic_grads[p][j]
            ));
        }
    }
}

fn end_to_end_micro_vit(seed: u64, report: &mut GradCheckReport) {
    let spec = micro_vit_spec();
    let model = Model::build(&spec, seed ^ 0xAB).unwrap();
    let mut rng = Rng::derive(seed, &[7]);
    let images: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0)).collect();
    let targets = Tensor::new(
        vec![2, 3],
        (0..6).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let weights = vec![1.3, 0.7, 1.0];
    let teacher = rand_tensor(&mut rng, &[2, 3], 0.1, 0.9);
    let tau = 1.5;

    let loss_of = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let traced = m
            .forward_traced(&mut tape, &images, ForwardOptions { train: true, ..Default::default() })
            .unwrap();
        let bce = tape.weighted_bce(traced.class_logits, &targets, &weights).unwrap();
        let kl = tape.bernoulli_kl(traced.dist_logits.unwrap(), &teacher, tau).unwrap();
        let kl_scaled = tape.scale(kl, 0.8);
        let total = tape.add(bce, kl_scaled).unwrap();
        tape.value(total).item()
    };

    let mut tape = Tape::new();
    let traced = model
        .forward_traced(&mut tape, &images, ForwardOptions { train: true, ..Default::default() })
        .unwrap();
    let bce = tape.weighted_bce(traced.class_logits, &targets, &weights).unwrap();
    let kl = tape.bernoulli_kl(traced.dist_logits.unwrap(), &teacher, tau).unwrap();
    let kl_scaled = tape.scale(kl, 0.8);
    let total = tape.add(bce, kl_scaled).unwrap();
    tape.backward(total).unwrap();
    let analytic: Vec<Vec<f64>> = traced
        .param_vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    check_model_loss("micro-deit e2e", &model, loss_of, &analytic, 150, seed, report);
}

fn end_to_end_micro_densenet(seed: u64, report: &mut GradCheckReport) {
    let spec = micro_densenet_spec();
    let model = Model::build(&spec, seed ^ 0xCD).unwrap();
    let mut rng = Rng::derive(seed, &[8]);
    let images: Vec<Tensor> =
        (0..2).map(|_| rand_tensor(&mut rng, &[3, 16, 16], 0.0, 1.0)).collect();
    let targets = Tensor::new(
        vec![2, 3],
        (0..6).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let weights = vec![0.9, 1.4, 1.1];

    let loss_of = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let traced = m
            .forward_traced(&mut tape, &images, ForwardOptions { train: true, ..Default::default() })
            .unwrap();
        let bce = tape.weighted_bce(traced.class_logits, &targets, &weights).unwrap();
        tape.value(bce).item()
    };

    let mut tape = Tape::new();
    let traced = model
        .forward_traced(&mut tape, &images, ForwardOptions { train: true, ..Default::default() })
        .unwrap();
    let bce = tape.weighted_bce(traced.class_logits, &targets, &weights).unwrap();
    tape.backward(bce).unwrap();
    let analytic: Vec<Vec<f64>> = traced
        .param_vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    check_model_loss("micro-cnn e2e", &model, loss_of, &analytic, 150, seed, report);
}

// ---------------------------------------------------------------- oracles

/// Per-class logistic regression on the five synthetic region-mean features,
/// trained with full-batch gradient descent. This is the learnability
/// baseline the trained networks are compared against.
pub struct LogisticOracle {
    /// One (weights[5], bias) pair per class.
    pub params: Vec<([f64; 5], f64)>,
}

impl LogisticOracle {
    pub fn fit(
        dataset: &crate::data::LoadedDataset,
        train_ids: &[usize],
        iters: usize,
        lr: f64,
    ) -> LogisticOracle {
        let feats: Vec<[f64; 5]> = train_ids
            .iter()
            .map(|&i| crate::data::synth::region_features(&dataset.images[i]))
            .collect();
        let targets = dataset.targets_for(train_ids);
        let n = feats.len() as f64;
        let mut params = Vec::with_capacity(5);
        for k in 0..5 {
            let mut w = [0.0f64; 5];
            let mut b = 0.0f64;
            for _ in 0..iters {
                let mut gw = [0.0f64; 5];
                let mut gb = 0.0f64;
                for (x, t) in feats.iter().zip(&targets) {
                    let z: f64 = x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
                    let err = crate::tensor::sigmoid(z) - t[k];
                    for j in 0..5 {
                        gw[j] += err * x[j] / n;
                    }
                    gb += err / n;
                }
                for j in 0..5 {
                    w[j] -= lr * gw[j];
                }
                b -= lr * gb;
            }
            params.push((w, b));
        }
        LogisticOracle { params }
    }

    pub fn predict(&self, img: &crate::data::GrayImage) -> [f64; 5] {
        let x = crate::data::synth::region_features(img);
        let mut out = [0.0; 5];
        for (k, (w, b)) in self.params.iter().enumerate() {
            let z: f64 = x.iter().zip(w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
            out[k] = crate::tensor::sigmoid(z);
        }
        out
    }

    /// Support-weighted AUROC of the oracle on the given split.
    pub fn weighted_auroc(
        &self,
        dataset: &crate::data::LoadedDataset,
        ids: &[usize],
    ) -> Result<f64> {
        let probs: Vec<[f64; 5]> =
            ids.iter().map(|&i| self.predict(&dataset.images[i])).collect();
        let targets = dataset.targets_for(ids);
        let report =
            crate::metrics::MetricsReport::compute("oracle", 0, 1.0, &probs, &targets, 0.5)?;
        report
            .weighted_auroc
            .ok_or_else(|| crate::error::Error::UndefinedMetric("oracle auroc undefined".into()))
    }
}
