//! Seeded random streams.
//!
//! All randomness goes through ChaCha8 keyed by `(seed, stream)`, so a run is
//! reproducible bit-for-bit on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent generator for one purpose within a run.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for a sub-run (phase, stage, arm) derived from a run seed.
pub fn derive_seed(seed: u64, stream_id: u64) -> u64 {
    use rand::RngCore;
    stream(seed, stream_id).next_u64()
}

/// Stream identifiers. Distinct purposes never share a stream.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA_SPLIT: u64 = 2;
    pub const CHUNKS: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SYNTHETIC_MEANS: u64 = 5;
    pub const SYNTHETIC_TRAIN: u64 = 6;
    pub const SYNTHETIC_TEST: u64 = 7;
    pub const HEAD_RESET: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const SUBSAMPLE: u64 = 10;
    pub const PHASE: u64 = 11;

    /// Stream for a per-item draw (layer index, epoch, ...) under `base`.
    pub fn indexed(base: u64, index: u64) -> u64 {
        (base << 32) | (index & 0xffff_ffff)
    }
}
