use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::{Result, Tensor, TensorError};

/// Seeded xoshiro256** stream. There is no global generator: every
/// consumer receives a `Prng` explicitly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prng {
    seed: u64,
    state: Xoshiro256StarStar,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            state: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for sub-task `index` (e.g. one dataset sample).
    pub fn derive(seed: u64, index: u64) -> Self {
        // SplitMix-style mixing so neighbouring indices land far apart.
        let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Self::new(z ^ (z >> 31))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state.next_u64()
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        // Lemire's multiply-shift; the bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn uniform_scalar(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller (one draw per pair of uniforms).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64, shape: &[usize]) -> Result<Tensor> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(TensorError::Validation(format!("invalid uniform range [{lo}, {hi})")));
        }
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.uniform_scalar(lo, hi)).collect())
    }

    pub fn normal(&mut self, mean: f64, std: f64, shape: &[usize]) -> Result<Tensor> {
        if !std.is_finite() || !mean.is_finite() || std <= 0.0 {
            return Err(TensorError::Validation(format!("invalid normal std {std}")));
        }
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| mean + std * self.standard_normal()).collect())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let a = Prng::new(7).uniform(-1.0, 1.0, &[3, 5]).unwrap();
        let b = Prng::new(7).uniform(-1.0, 1.0, &[3, 5]).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = Prng::new(8).uniform(-1.0, 1.0, &[3, 5]).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn uniform_mean_close_to_half() {
        let t = Prng::new(11).uniform(0.0, 1.0, &[10_000]).unwrap();
        let mean = t.sum() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        assert!(t.data().iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn normal_std_close_to_one() {
        let t = Prng::new(12).normal(0.0, 1.0, &[10_000]).unwrap();
        let mean = t.sum() / 10_000.0;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 9_999.0;
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut p = Prng::new(0);
        assert!(p.uniform(1.0, 1.0, &[2]).is_err());
        assert!(p.uniform(2.0, 1.0, &[2]).is_err());
        assert!(p.normal(0.0, 0.0, &[2]).is_err());
    }

    #[test]
    fn first_output_matches_reference_stream() {
        // xoshiro256** seeded through SplitMix64(0); the first SplitMix64
        // output is the well-known 0xE220A8397B1DCDAF.
        let mut sm = 0u64;
        let mut splitmix = || {
            sm = sm.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        let s: [u64; 4] = std::array::from_fn(|_| splitmix());
        assert_eq!(s[0], 0xE220_A839_7B1D_CDAF);
        let expected = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        assert_eq!(Prng::new(0).next_u64(), expected);
    }
}
