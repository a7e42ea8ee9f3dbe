//! Seeded splitmix64 PRNG.
//!
//! Fully specified so corpus golden files and parameter initializations are
//! portable across platforms: integer-only state transitions, with floats
//! derived from the top 53 bits.

/// splitmix64 stream. Substreams derived with [`SplitMix64::substream`] are
/// independent for distinct tags, which keeps per-task / per-region draws
/// stable regardless of evaluation order.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Independent stream for `(seed, tag)`; used for per-task corpus
    /// generation and per-region parameter init.
    pub fn substream(seed: u64, tag: u64) -> Self {
        SplitMix64 {
            state: mix(seed ^ tag.wrapping_mul(GOLDEN).wrapping_add(GOLDEN)),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `0..bound`. Modulo bias is negligible for desk-scale bounds.
    pub fn next_index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_index bound must be positive");
        (self.next_u64() % bound as u64) as usize
    }

    /// In-place Fisher-Yates shuffle, integer arithmetic only.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}
