//! Seeded random streams.
//!
//! Every experiment draws from ChaCha8 streams keyed by `(base_seed, index)`,
//! so ensemble members are independent of how work is scheduled across
//! threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used throughout the crate.
pub type SaRng = ChaCha8Rng;

/// Stream `index` of the family seeded by `base_seed`.
pub fn stream_rng(base_seed: u64, index: u64) -> SaRng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    rng
}

/// Single-run generator; identical to stream 0 of `seed`.
pub fn seeded_rng(seed: u64) -> SaRng {
    stream_rng(seed, 0)
}
