//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`SeededRng`], ChaCha with 8
//! rounds keyed by `SeedableRng::seed_from_u64`. Its output stream is fixed
//! across platforms and releases of `rand_chacha`, so a seed pins a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-subject seed: `seed ⊕ index`.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Independent sub-stream for a named stage (golden-ratio increment keeps
/// `stream = 0` equal to the parent seed).
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
