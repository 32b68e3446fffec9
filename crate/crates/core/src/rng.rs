//! Seeded counter-based random number generation.
//!
//! Every stochastic operation in the engine (phantom layout, Poisson count
//! sampling, noise injection, weight initialisation) draws from this one
//! generator so that results are bit-identical across runs, platforms and
//! reimplementations. The state update is the splitmix64 sequence:
//!
//! ```text
//! state += 0x9E37_79B9_7F4A_7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9
//! z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB
//! output = z ^ (z >> 31)
//! ```
//!
//! Uniform doubles take the top 53 bits of the output; Gaussian variates use
//! Box-Muller on two uniforms; Poisson variates use CDF inversion for small
//! means and a rounded normal approximation (clamped at zero) for large ones.

use num_traits::Float;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Splitmix64 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform double in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform double in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn below(&mut self, n: u64) -> u64 {
        // Modulo bias is irrelevant at the ranges used here (n << 2^64).
        self.next_u64() % n
    }

    /// Standard normal variate via Box-Muller. One uniform pair per call;
    /// the second deviate is discarded to keep the draw order trivial.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * core::f64::consts::PI * u2;
        r * theta.cos()
    }

    /// Poisson variate with mean `lambda`. Inversion below 30, rounded
    /// normal approximation (clamped at zero) at or above 30.
    pub fn next_poisson(&mut self, lambda: f64) -> f64 {
        if lambda <= 0.0 {
            return 0.0;
        }
        if lambda < 30.0 {
            let u = self.next_f64();
            let mut p = (-lambda).exp();
            let mut cdf = p;
            let mut k: u64 = 0;
            // Walk the CDF; the loop bound guards against roundoff at the tail.
            while u > cdf && k < 10_000 {
                k += 1;
                p *= lambda / k as f64;
                cdf += p;
            }
            k as f64
        } else {
            let g = self.next_gaussian();
            let x = lambda + lambda.sqrt() * g;
            let rounded = (x + 0.5).floor();
            if rounded < 0.0 {
                0.0
            } else {
                rounded
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_sequence() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 1234567, cross-checked against the
        // published splitmix64 reference sequence.
        let mut r = SplitMix64::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
        assert_eq!(r.next_u64(), 9817491932198370423);
    }

    #[test]
    fn uniform_in_range() {
        let mut r = SplitMix64::new(7);
        for _ in 0..1000 {
            let u = r.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn poisson_mean_matches() {
        let mut r = SplitMix64::new(3);
        for &lambda in &[0.5, 5.0, 28.0, 60.0, 200.0] {
            let n = 20_000;
            let mut sum = 0.0;
            for _ in 0..n {
                sum += r.next_poisson(lambda);
            }
            let mean = sum / n as f64;
            let tol = 4.0 * (lambda / n as f64).sqrt();
            assert!(
                (mean - lambda).abs() < tol,
                "lambda={lambda} mean={mean}"
            );
        }
    }

    #[test]
    fn poisson_integer_nonnegative() {
        let mut r = SplitMix64::new(9);
        for &lambda in &[0.0, 2.5, 31.0, 500.0] {
            for _ in 0..200 {
                let k = r.next_poisson(lambda);
                assert!(k >= 0.0);
                assert_eq!(k, k.floor());
            }
        }
    }

    #[test]
    fn gaussian_moments() {
        let mut r = SplitMix64::new(11);
        let n = 50_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let g = r.next_gaussian();
            s1 += g;
            s2 += g * g;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean={mean}");
        assert!((var - 1.0).abs() < 0.03, "var={var}");
    }
}
