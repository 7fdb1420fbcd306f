//! AdamW: bias-corrected Adam moments with decoupled weight decay.

use super::TrainConfig;
use crate::tensor::Tensor;

pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[(String, &Tensor)]) -> AdamState {
        AdamState {
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One optimizer step at timestep `t` (1-based). Weight decay multiplies
/// parameters by (1 - lr * wd) before the moment update touches them.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (p, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[p];
        let v = &mut state.v[p];
        let data = param.1.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            data[j] *= 1.0 - lr * cfg.weight_decay;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    fn cfg(wd: f64) -> TrainConfig {
        TrainConfig { weight_decay: wd, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_no_decay_leaves_parameter_unchanged() {
        let mut t = one_param(1.5);
        let mut params = vec![("p".to_string(), &mut t)];
        let mut state = AdamState { m: vec![vec![0.0]], v: vec![vec![0.0]] };
        adamw_step(&mut params, &[vec![0.0]], &mut state, 1, 1e-3, &cfg(0.0));
        assert_eq!(params[0].1.data()[0], 1.5);
    }

    #[test]
    fn zero_gradient_with_decay_is_pure_multiplicative_decay() {
        let mut t = one_param(2.0);
        let (lr, wd) = (0.01, 0.1);
        let mut state = AdamState { m: vec![vec![0.0]], v: vec![vec![0.0]] };
        let mut expect = 2.0;
        for step in 1..=5u64 {
            let mut params = vec![("p".to_string(), &mut t)];
            adamw_step(&mut params, &[vec![0.0]], &mut state, step, lr, &cfg(wd));
            expect *= 1.0 - lr * wd;
            assert!((t.data()[0] - expect).abs() < 1e-15, "step {step}");
        }
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_lr() {
        // Adam's sign property: with wd = 0 and a constant gradient the
        // per-step move tends to lr * g / (|g| + eps) ~ lr
        let mut t = one_param(0.0);
        let lr = 1e-3;
        let mut state = AdamState { m: vec![vec![0.0]], v: vec![vec![0.0]] };
        let mut prev = 0.0;
        let mut delta = 0.0;
        for step in 1..=200u64 {
            let mut params = vec![("p".to_string(), &mut t)];
            adamw_step(&mut params, &[vec![0.7]], &mut state, step, lr, &cfg(0.0));
            delta = (t.data()[0] - prev).abs();
            prev = t.data()[0];
        }
        assert!((delta / lr - 1.0).abs() < 1e-3, "late-step move {delta}");
    }

    #[test]
    fn single_step_matches_closed_form_oracle() {
        let theta0 = 0.8;
        let g = -0.3;
        let (lr, wd) = (2e-3, 0.05);
        let c = cfg(wd);
        let mut t = one_param(theta0);
        let mut state = AdamState { m: vec![vec![0.0]], v: vec![vec![0.0]] };
        let mut params = vec![("p".to_string(), &mut t)];
        adamw_step(&mut params, &[vec![g]], &mut state, 1, lr, &c);

        // closed form at t = 1
        let m = (1.0 - c.adam_beta1) * g;
        let v = (1.0 - c.adam_beta2) * g * g;
        let m_hat = m / (1.0 - c.adam_beta1);
        let v_hat = v / (1.0 - c.adam_beta2);
        let expect = theta0 * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + c.adam_eps);
        assert!((t.data()[0] - expect).abs() < 1e-12);
    }
}
