//! Seeded, counter-based random streams.
//!
//! Every simulation derives its generators from a `(seed, stream)` pair so
//! that parallel workers never share mutable RNG state and results do not
//! depend on scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Independent generator for substream `stream` of the run seeded by `seed`.
pub fn substream(seed: u64, stream: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for a child run, taken from substream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    substream(seed, stream).next_u64()
}
