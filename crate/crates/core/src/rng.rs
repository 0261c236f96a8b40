//! Seed derivation for reproducible, independently seeded streams.
//!
//! Every random stream in the pipeline is keyed by a master seed plus a
//! path of counters (run index, speaker index, ...). The key is mixed with
//! SplitMix64 so that neighbouring counters give unrelated streams, and the
//! result seeds a ChaCha generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a counter path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng_from(master: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, path))
}

/// Stream tags, so that different consumers of the same master seed never
/// share a stream.
pub mod stream {
    pub const SYNTH_FACE: u64 = 1;
    pub const SYNTH_VOICE: u64 = 2;
    pub const SYNTH_SPLIT: u64 = 3;
    pub const SYNTH_TEMPLATE: u64 = 4;
    pub const INIT: u64 = 10;
    pub const BATCH: u64 = 11;
    pub const DIFFUSION: u64 = 12;
    pub const HARNESS_RUN: u64 = 20;
}
