//! Seeded pseudo-random number generation.
//!
//! All randomness in this crate flows through [`Rng`], a SplitMix64 generator
//! (Steele, Lea & Flood's `splitmix64` finalizer applied to a Weyl sequence
//! with increment 0x9E3779B97F4A7C15). The algorithm is fixed so that runs are
//! reproducible across platforms and reimplementable from this description.
//!
//! Independent streams are derived with [`Rng::derive`], which mixes labels
//! into the seed instead of consuming draws, so adding a stream never shifts
//! another stream's output.

/// SplitMix64 generator state.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const WEYL: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 output mix: turns a Weyl-sequence element into a
/// well-distributed 64-bit value.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent stream from this seed and a list of labels.
    ///
    /// The labels are folded into the state one at a time through the same
    /// mixer, so `derive(&[a, b])` and `derive(&[b, a])` differ.
    pub fn derive(seed: u64, labels: &[u64]) -> Self {
        let mut state = mix(seed ^ WEYL);
        for &label in labels {
            state = mix(state.wrapping_add(WEYL).wrapping_add(label));
        }
        Rng { state }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(WEYL);
        mix(self.state)
    }

    /// Uniform double in [0, 1): top 53 bits scaled by 2^-53.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) via 128-bit multiply (Lemire reduction).
    #[inline]
    pub fn next_below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (((self.next_u64() as u128) * (bound as u128)) >> 64) as usize
    }

    /// Standard normal draw via the Box-Muller transform.
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample an index from unnormalized nonnegative weights.
    pub fn sample_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
