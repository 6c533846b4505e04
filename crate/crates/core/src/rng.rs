//! Deterministic pseudo-random numbers.
//!
//! Everything stochastic in this crate (weight initialization, shuffling,
//! augmentation, synthetic data) draws from [`SplitMix64`], a fixed
//! counter-based generator: the state advances by the golden-ratio constant
//! and each output is a finalizing mix of the counter. The algorithm is
//! pinned here so that identical seeds produce identical streams on every
//! platform, independent of any external crate's stream evolution.
//!
//! Independent substreams are derived with [`SplitMix64::derive`], which
//! folds tag words through the same mixing function. Per-sample augmentation
//! streams, per-round cross-validation seeds, and per-fold training seeds
//! are all derived this way, so results do not depend on scheduling order.

/// SplitMix64 generator (Steele, Lea & Flood's `splitmix64` finalizer).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derives an independent stream from `seed` and a list of tag words.
    ///
    /// Each tag is absorbed by one full generator step, so `derive(s, &[a])`
    /// and `derive(s, &[b])` are decorrelated for `a != b`.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut state = mix(seed ^ GOLDEN);
        for &t in tags {
            state = mix(state.wrapping_add(GOLDEN) ^ t);
        }
        SplitMix64 { state }
    }

    /// Raw generator state, recorded in checkpoints for provenance.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)` (returns `lo` when the range is empty).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in `[0, n)` via rejection-free 128-bit scaling.
    pub fn range_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    pub fn next_bool(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }

    /// Standard normal via Box-Muller (cosine branch only; one draw pair per value).
    pub fn next_normal(&mut self) -> f64 {
        loop {
            let u1 = self.next_f64();
            if u1 > 0.0 {
                let u2 = self.next_f64();
                let r = crate::math::sqrt(-2.0 * crate::math::ln(u1));
                return r * crate::math::cos(2.0 * core::f64::consts::PI * u2);
            }
        }
    }

    /// Normal with standard deviation `sigma`, resampled until within `±2σ`.
    pub fn next_normal_truncated(&mut self, sigma: f64) -> f64 {
        loop {
            let z = self.next_normal();
            if z.abs() <= 2.0 {
                return z * sigma;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.range_usize(i + 1);
            items.swap(i, j);
        }
    }
}
