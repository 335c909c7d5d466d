//! Deterministic SplitMix64 generator.
//!
//! Every stochastic choice in the crate (initialization, scene sampling,
//! random patches, shuffling) draws from this generator so results can be
//! reproduced bit-for-bit from a seed in any language. The recurrence is:
//!
//! ```text
//! state = state + 0x9E3779B97F4A7C15           (wrapping)
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9     (wrapping)
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB     (wrapping)
//! output = z ^ (z >> 31)
//! ```
//!
//! Derived draws:
//! - `next_f32`: `(next_u64 >> 40) as f32 / 2^24`, in `[0, 1)`
//! - `next_f64`: `(next_u64 >> 11) as f64 / 2^53`, in `[0, 1)`
//! - `below(n)`: `next_u64 % n` (bias is negligible for the small `n` used here)
//! - `split()`: a new generator seeded with `next_u64 ^ 0x5851F42D4C957F2D`
//! - `normal()`: Box-Muller on two `next_f64` draws, first output only

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLIT_SALT: u64 = 0x5851_F42D_4C95_7F2D;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    pub fn split(&mut self) -> Self {
        Self::new(self.next_u64() ^ SPLIT_SALT)
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Knuth's multiplication method; fine for the small means used by scene sampling.
    pub fn poisson(&mut self, mean: f64) -> usize {
        if mean <= 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0usize;
        let mut p = 1.0f64;
        loop {
            p *= self.next_f64();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }

    /// Fisher-Yates, last index first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
