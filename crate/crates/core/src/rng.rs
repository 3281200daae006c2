//! Seed derivation for reproducible, independent random streams.
//!
//! Every unit of work (a grid cell, a replicate, an imputation draw) gets its
//! own ChaCha stream keyed by the master seed and a derived stream id, so the
//! numbers it sees do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Returns the generator for `stream` under `master`.
pub fn stream(master: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer; used to fold structured keys into a stream id.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of key parts into one stream id.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p)))
}

/// Stable 64-bit hash of a label (FNV-1a), for mixing names into stream ids.
pub fn label(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
