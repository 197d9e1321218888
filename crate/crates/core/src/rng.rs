//! Deterministic pseudo-random numbers.
//!
//! A SplitMix64 stream underlies every random decision in the crate so that a
//! seed fully determines weight initialization, dataset generation and batch
//! order, on every platform. Normal draws use Box-Muller on two consecutive
//! uniform draws; the pair is always consumed within a single call, so the
//! draw sequence never depends on how callers interleave uniform and normal
//! requests.

use std::f64::consts::TAU;

/// Seeded SplitMix64 generator with a draw counter.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    draws: u64,
}

/// Derives an independent stream seed from a base seed and a tag.
///
/// Used to give each sample, epoch or module its own stream without
/// coupling their draw counts.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed, draws: 0 }
    }

    /// Independent stream derived from this generator's seed and a tag.
    pub fn derive(&self, tag: u64) -> Rng {
        Rng::new(derive_seed(self.state, tag))
    }

    /// Number of raw 64-bit draws consumed so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [0, 1) as f32.
    pub fn uniform(&mut self) -> f32 {
        self.uniform_f64() as f32
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw via Box-Muller.
    ///
    /// Consumes exactly two uniform draws and returns the cosine branch;
    /// the sine twin is discarded so pairs are never split across calls.
    pub fn normal(&mut self) -> f32 {
        let u1 = 1.0 - self.uniform_f64(); // (0, 1], keeps ln finite
        let u2 = self.uniform_f64();
        ((-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()) as f32
    }

    /// Uniform index in [0, n). Unbiased enough for shuffles via 128-bit
    /// multiply-shift; n must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
