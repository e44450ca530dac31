//! Splitting one root seed into independent per-purpose streams.
//!
//! `derive_seed(root, stream, index)` mixes the three inputs with the
//! SplitMix64 finalizer. Streams used by the trainer are listed below; the
//! index is the training iteration (or 0 for one-off draws).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_ROLLOUT: u64 = 2;
pub const STREAM_GOALS: u64 = 3;
pub const STREAM_EVAL: u64 = 4;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(root) ^ stream) ^ index)
}

pub fn derive_rng(root: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, index))
}
