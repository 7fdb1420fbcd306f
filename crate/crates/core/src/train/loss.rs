//! Losses: inverse-frequency class weights, weighted BCE-with-logits, and
//! the per-label Bernoulli distillation KL.

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tape, Tensor, Var};

/// Inverse-frequency weights: w_k = n / (K * positives_k). A balanced
/// dataset (n/K positives everywhere) yields all-ones weights. Errors when a
/// class has no positives.
pub fn class_weights(labels: &[[f64; NUM_CLASSES]]) -> Result<[f64; NUM_CLASSES]> {
    let n = labels.len() as f64;
    let mut weights = [0.0; NUM_CLASSES];
    for (k, w) in weights.iter_mut().enumerate() {
        let count: f64 = labels.iter().map(|row| row[k]).sum();
        if count == 0.0 {
            return Err(Error::Weighting { class: k });
        }
        *w = n / (NUM_CLASSES as f64 * count);
    }
    Ok(weights)
}

/// `class_weights` with a cap: classes without positives get the cap, all
/// weights are clipped to it.
pub fn class_weights_capped(labels: &[[f64; NUM_CLASSES]], cap: f64) -> [f64; NUM_CLASSES] {
    let n = labels.len() as f64;
    let mut weights = [0.0; NUM_CLASSES];
    for (k, w) in weights.iter_mut().enumerate() {
        let count: f64 = labels.iter().map(|row| row[k]).sum();
        *w = if count == 0.0 { cap } else { (n / (NUM_CLASSES as f64 * count)).min(cap) };
    }
    weights
}

/// Mean weighted BCE over batch and classes (see [`Tape::weighted_bce`]).
pub fn weighted_bce(
    tape: &mut Tape,
    logits: Var,
    targets: &Tensor,
    weights: &[f64],
) -> Result<Var> {
    tape.weighted_bce(logits, targets, weights)
}

/// Distillation loss: mean per-label Bernoulli KL between teacher
/// probabilities sigma(z_t / tau) and student probabilities sigma(z_s / tau),
/// scaled by tau^2. The teacher side is detached.
pub fn distill_kl(
    tape: &mut Tape,
    dist_logits: Var,
    teacher_logits: &Tensor,
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Contract(format!("temperature must be > 0, got {tau}")));
    }
    let teacher_probs = teacher_logits.map(|z| sigmoid(z / tau));
    tape.bernoulli_kl(dist_logits, &teacher_probs, tau)
}

pub struct LossParts {
    pub total: Var,
    pub bce: Var,
    pub kl: Option<Var>,
}

/// weighted_bce + lambda * distill_kl when distilling, plain weighted_bce
/// otherwise. `dist_logits` and `teacher_logits` must be given together.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    class_logits: Var,
    dist_logits: Option<Var>,
    targets: &Tensor,
    teacher_logits: Option<&Tensor>,
    weights: &[f64],
    lambda: f64,
    tau: f64,
) -> Result<LossParts> {
    if dist_logits.is_some() != teacher_logits.is_some() {
        return Err(Error::Contract(
            "distillation logits and teacher logits must be given together".into(),
        ));
    }
    let bce = weighted_bce(tape, class_logits, targets, weights)?;
    match (dist_logits, teacher_logits) {
        (Some(d), Some(t)) => {
            let kl = distill_kl(tape, d, t, tau)?;
            let total = if lambda == 0.0 {
                bce
            } else {
                let scaled = tape.scale(kl, lambda);
                tape.add(bce, scaled)?
            };
            Ok(LossParts { total, bce, kl: Some(kl) })
        }
        _ => Ok(LossParts { total: bce, bce, kl: None }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn labels_from_counts(n: usize, counts: [usize; 5]) -> Vec<[f64; 5]> {
        let mut rows = vec![[0.0; 5]; n];
        for (k, &c) in counts.iter().enumerate() {
            for row in rows.iter_mut().take(c) {
                row[k] = 1.0;
            }
        }
        rows
    }

    #[test]
    fn balanced_weights_are_ones() {
        let labels = labels_from_counts(50, [10, 10, 10, 10, 10]);
        let w = class_weights(&labels).unwrap();
        for v in w {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn formula_example() {
        let labels = labels_from_counts(50, [10, 40, 25, 25, 25]);
        let w = class_weights(&labels).unwrap();
        let expect = [1.0, 0.25, 0.4, 0.4, 0.4];
        for (a, b) in w.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplication_leaves_weights_unchanged() {
        let labels = labels_from_counts(40, [7, 13, 20, 3, 11]);
        let mut doubled = labels.clone();
        doubled.extend(labels.iter().cloned());
        let a = class_weights(&labels).unwrap();
        let b = class_weights(&doubled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_count_product_is_n_over_k() {
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let n = 20 + rng.below(60);
            let labels: Vec<[f64; 5]> = (0..n)
                .map(|i| {
                    let mut row = [0.0; 5];
                    for (k, v) in row.iter_mut().enumerate() {
                        // guarantee one positive per class via the first rows
                        *v = if i == k || rng.bernoulli(0.4) { 1.0 } else { 0.0 };
                    }
                    row
                })
                .collect();
            let w = class_weights(&labels).unwrap();
            for k in 0..5 {
                let count: f64 = labels.iter().map(|r| r[k]).sum();
                assert!((w[k] * count - n as f64 / 5.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_class_errors_uncapped_and_caps_capped() {
        let labels = labels_from_counts(10, [2, 0, 3, 4, 5]);
        assert!(matches!(class_weights(&labels), Err(Error::Weighting { class: 1 })));
        let w = class_weights_capped(&labels, 100.0);
        assert_eq!(w[1], 100.0);
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_bce_to_zero() {
        let mut tape = Tape::new();
        let z = tape.leaf(
            Tensor::new(vec![1, 5], vec![30.0, -30.0, 30.0, -30.0, 30.0]).unwrap().with_grad(),
        );
        let t = Tensor::new(vec![1, 5], vec![1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let loss = weighted_bce(&mut tape, z, &t, &[1.0; 5]).unwrap();
        assert!(tape.value(loss).item() < 1e-9);
    }

    #[test]
    fn bce_matches_direct_formula_oracle() {
        let mut rng = Rng::new(17);
        for _ in 0..30 {
            let b = 1 + rng.below(4);
            let zs: Vec<f64> = (0..b * 5).map(|_| rng.range_f64(-4.0, 4.0)).collect();
            let ts: Vec<f64> =
                (0..b * 5).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
            let ws: Vec<f64> = (0..5).map(|_| rng.range_f64(0.3, 2.5)).collect();
            let mut tape = Tape::new();
            let z = tape.leaf(Tensor::new(vec![b, 5], zs.clone()).unwrap().with_grad());
            let t = Tensor::new(vec![b, 5], ts.clone()).unwrap();
            let loss = weighted_bce(&mut tape, z, &t, &ws).unwrap();
            // direct formula in 64-bit
            let mut acc = 0.0;
            for (i, (&zv, &tv)) in zs.iter().zip(&ts).enumerate() {
                let p = sigmoid(zv);
                acc += ws[i % 5] * (-tv * p.ln() - (1.0 - tv) * (1.0 - p).ln());
            }
            let expect = acc / (b * 5) as f64;
            assert!((tape.value(loss).item() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_zero_for_identical_logits_and_nonnegative() {
        let mut rng = Rng::new(23);
        for _ in 0..1000 {
            let zs: Vec<f64> = (0..5).map(|_| rng.range_f64(-5.0, 5.0)).collect();
            let tau = rng.range_f64(0.5, 3.0);
            let mut tape = Tape::new();
            let student = tape.leaf(Tensor::new(vec![1, 5], zs.clone()).unwrap().with_grad());
            let teacher = Tensor::new(vec![1, 5], zs).unwrap();
            let kl = distill_kl(&mut tape, student, &teacher, tau).unwrap();
            assert!(tape.value(kl).item().abs() < 1e-12);

            let other: Vec<f64> = (0..5).map(|_| rng.range_f64(-5.0, 5.0)).collect();
            let mut tape = Tape::new();
            let student = tape.leaf(Tensor::new(vec![1, 5], other).unwrap().with_grad());
            let kl = distill_kl(&mut tape, student, &teacher, tau).unwrap();
            assert!(tape.value(kl).item() >= -1e-12);
        }
    }

    #[test]
    fn kl_temperature_scaling_matches_direct_formula() {
        let (z_t, z_s, tau) = (1.2f64, -0.4f64, 2.0f64);
        let mut tape = Tape::new();
        let student = tape.leaf(Tensor::new(vec![1, 1], vec![z_s]).unwrap().with_grad());
        let teacher = Tensor::new(vec![1, 1], vec![z_t]).unwrap();
        let kl = distill_kl(&mut tape, student, &teacher, tau).unwrap();
        let p = sigmoid(z_t / tau);
        let q = sigmoid(z_s / tau);
        let expect = tau * tau * (p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln());
        assert!((tape.value(kl).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_reduces_to_bce_without_teacher_or_with_lambda_zero() {
        let mut rng = Rng::new(41);
        let zs: Vec<f64> = (0..10).map(|_| rng.range_f64(-2.0, 2.0)).collect();
        let ds: Vec<f64> = (0..10).map(|_| rng.range_f64(-2.0, 2.0)).collect();
        let ts: Vec<f64> = (0..10).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let teacher = Tensor::new(vec![2, 5], (0..10).map(|_| rng.range_f64(-2.0, 2.0)).collect())
            .unwrap();
        let targets = Tensor::new(vec![2, 5], ts).unwrap();
        let w = [1.0, 2.0, 0.5, 1.5, 0.7];

        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![2, 5], zs.clone()).unwrap().with_grad());
        let d = tape.leaf(Tensor::new(vec![2, 5], ds.clone()).unwrap().with_grad());
        let plain = weighted_bce(&mut tape, z, &targets, &w).unwrap();
        let no_teacher =
            total_loss(&mut tape, z, None, &targets, None, &w, 1.0, 1.0).unwrap();
        assert_eq!(tape.value(no_teacher.total).item(), tape.value(plain).item());
        let lambda0 =
            total_loss(&mut tape, z, Some(d), &targets, Some(&teacher), &w, 0.0, 1.0).unwrap();
        assert_eq!(tape.value(lambda0.total).item(), tape.value(plain).item());
    }

    #[test]
    fn total_loss_is_component_sum() {
        let mut rng = Rng::new(43);
        let zs: Vec<f64> = (0..10).map(|_| rng.range_f64(-2.0, 2.0)).collect();
        let ds: Vec<f64> = (0..10).map(|_| rng.range_f64(-2.0, 2.0)).collect();
        let ts: Vec<f64> = (0..10).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let teacher =
            Tensor::new(vec![2, 5], (0..10).map(|_| rng.range_f64(-2.0, 2.0)).collect()).unwrap();
        let targets = Tensor::new(vec![2, 5], ts).unwrap();
        let w = [1.0; 5];
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![2, 5], zs).unwrap().with_grad());
        let d = tape.leaf(Tensor::new(vec![2, 5], ds).unwrap().with_grad());
        let parts =
            total_loss(&mut tape, z, Some(d), &targets, Some(&teacher), &w, 1.0, 1.0).unwrap();
        let total = tape.value(parts.total).item();
        let bce = tape.value(parts.bce).item();
        let kl = tape.value(parts.kl.unwrap()).item();
        assert!((total - (bce + kl)).abs() < 1e-12);
    }

    #[test]
    fn half_pair_is_contract_error() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 5]).with_grad());
        let d = tape.leaf(Tensor::zeros(&[1, 5]).with_grad());
        let targets = Tensor::zeros(&[1, 5]);
        let w = [1.0; 5];
        assert!(matches!(
            total_loss(&mut tape, z, Some(d), &targets, None, &w, 1.0, 1.0),
            Err(Error::Contract(_))
        ));
        let teacher = Tensor::zeros(&[1, 5]);
        assert!(matches!(
            total_loss(&mut tape, z, None, &targets, Some(&teacher), &w, 1.0, 1.0),
            Err(Error::Contract(_))
        ));
    }
}
