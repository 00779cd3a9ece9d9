//! Deterministic 64-bit random source.
//!
//! Every stochastic draw in the library flows through [`SplitMix64`], seeded
//! via [`absorb`] chains, so results are bit-reproducible across runs and
//! independent of thread scheduling.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds one word into a running seed derivation.
///
/// Chaining `absorb` over a sequence of words yields a stable 64-bit hash of
/// that sequence; used to derive per-image, per-level, per-sample seeds from
/// a master seed.
#[inline]
pub fn absorb(acc: u64, word: u64) -> u64 {
    mix(acc.wrapping_add(GAMMA) ^ word)
}

/// Absorbs a byte string (8-byte little-endian chunks, zero padded) plus its
/// length, so distinct strings map to distinct chains.
pub fn absorb_bytes(mut acc: u64, bytes: &[u8]) -> u64 {
    for chunk in bytes.chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        acc = absorb(acc, u64::from_le_bytes(word));
    }
    absorb(acc, bytes.len() as u64)
}

/// SplitMix64 pseudo-random stream.
///
/// Small state, platform-stable output, good enough statistics for noise
/// fields and weight init. Not cryptographic.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[0, n)`. Modulo bias is negligible for the small `n`
    /// used here and keeps the draw count per element fixed.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            slice.swap(i, j);
        }
    }
}
