//! Linear-warmup plus cosine-decay learning-rate schedule.

use super::TrainConfig;

/// Learning rate at a global step (0-based).
///
/// Warmup: lr_init * (step + 1) / warmup_steps, reaching lr_init exactly at
/// the last warmup step. After: lr_init * 0.5 * (1 + cos(pi * progress)),
/// progress running from 0 at the first post-warmup step to 1 at the final
/// step of training, so the last step decays to 0.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let total_steps = cfg.max_epochs * steps_per_epoch;
    if warmup_steps > 0 && step < warmup_steps {
        return cfg.lr_init * (step + 1) as f64 / warmup_steps as f64;
    }
    let last = total_steps.saturating_sub(1);
    let progress = if last <= warmup_steps {
        1.0
    } else {
        ((step - warmup_steps) as f64 / (last - warmup_steps) as f64).min(1.0)
    };
    cfg.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, max_epochs: usize, warmup: usize) -> TrainConfig {
        TrainConfig { lr_init: lr, max_epochs, warmup_epochs: warmup, ..TrainConfig::default() }
    }

    #[test]
    fn warmup_end_hits_lr_init_exactly() {
        let c = cfg(3e-4, 10, 2);
        let spe = 7;
        assert_eq!(lr_at(2 * spe - 1, spe, &c), 3e-4);
    }

    #[test]
    fn integral_cosine_midpoint_is_half_lr() {
        // warmup 2 steps, 13 total -> last = 12, span = 10, midpoint at 7
        let c = cfg(1.0, 13, 2);
        let v = lr_at(7, 1, &c);
        assert!((v - 0.5).abs() < 1e-12, "midpoint {v}");
        // non-integral midpoints bracket 0.5 lr symmetrically
        let c2 = cfg(1e-3, 6, 2);
        let (spe2, warmup2, last2) = (8, 16, 47);
        let mid = (warmup2 + last2) as f64 / 2.0;
        let lo = lr_at(mid.floor() as usize, spe2, &c2);
        let hi = lr_at(mid.ceil() as usize, spe2, &c2);
        assert!(((lo + hi) / 2.0 - 0.5e-3).abs() < 1e-5);
    }

    #[test]
    fn final_step_decays_to_zero() {
        let c = cfg(5e-5, 50, 2);
        let spe = 13;
        let v = lr_at(50 * 13 - 1, spe, &c);
        assert!(v.abs() < 1e-12 * c.lr_init, "final lr {v}");
    }

    #[test]
    fn warmup_strictly_increases_then_never_increases() {
        let c = cfg(1e-3, 8, 2);
        let spe = 6;
        let warmup = 12;
        let total = 48;
        for s in 1..warmup {
            assert!(lr_at(s, spe, &c) > lr_at(s - 1, spe, &c));
        }
        for s in warmup + 1..total {
            assert!(lr_at(s, spe, &c) <= lr_at(s - 1, spe, &c) + 1e-18);
        }
        // continuity at the boundary: first cosine step equals lr_init
        assert_eq!(lr_at(warmup, spe, &c), c.lr_init);
    }

    #[test]
    fn degenerate_schedules_stay_finite() {
        let c = cfg(1e-3, 4, 0);
        assert_eq!(lr_at(0, 5, &c), 1e-3);
        // single step of training
        let c1 = cfg(1e-3, 1, 0);
        assert!(lr_at(0, 1, &c1).abs() < 1e-15);
    }
}
