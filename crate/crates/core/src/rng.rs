//! Counter-based seeding. Every random draw in the crate comes from a ChaCha
//! stream keyed by `(seed, purpose, counters...)`, so work can be split across
//! threads and still reproduce the serial result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of counters into a new 64-bit key.
pub fn derive_key(seed: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

/// Generator for a purpose tag plus counters, e.g. `(MASK, step, tile)`.
pub fn stream(seed: u64, purpose: u64, counters: &[u64]) -> StreamRng {
    let key = derive_key(derive_key(seed, &[purpose]), counters);
    ChaCha8Rng::seed_from_u64(key)
}

/// Purpose tags keep unrelated consumers of one seed apart.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const BENCH: u64 = 5;
    pub const GRADCHECK: u64 = 6;
}
