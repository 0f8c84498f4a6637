//! Seeded random streams.
//!
//! Every random draw in the crate goes through a ChaCha stream keyed by a
//! `(seed, stream)` pair. Independent streams of the same seed never overlap,
//! so work split across threads reproduces bit-for-bit regardless of
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Returns the generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child stream id from a parent id and a small label, so nested
/// loops (seed -> size -> regime) can hand out distinct ids without a
/// global counter.
pub fn child_stream(parent: u64, label: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = parent
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(label.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
