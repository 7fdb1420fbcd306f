//! Small deterministic PRNG used everywhere randomness is needed.
//!
//! The whole harness promises bitwise reproducibility for a given seed, so
//! instead of depending on an external generator whose stream may change
//! between releases we keep a self-contained splitmix64. Statistical quality
//! is more than sufficient for data shuffling, augmentation and weight init.

/// splitmix64 stream generator.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent stream from a seed and a list of stream labels.
    /// Used to give e.g. every (epoch, sample) pair its own generator so
    /// results do not depend on batch composition or worker scheduling.
    pub fn derive(seed: u64, labels: &[u64]) -> Self {
        let mut s = seed ^ 0xA076_1D64_78BD_642F;
        for &l in labels {
            // fold each label in through one splitmix round
            s = splitmix64(&mut { s ^ l.wrapping_mul(0xE703_7ED1_A0B4_28DB) });
            let mut t = s;
            s = splitmix64(&mut t);
        }
        Rng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by resampling.
    pub fn trunc_normal(&mut self, sigma: f64) -> f64 {
        loop {
            let v = self.normal();
            if v.abs() <= 2.0 {
                return v * sigma;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
