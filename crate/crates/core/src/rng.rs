//! Deterministic random stream derivation.
//!
//! Every random consumer gets its own ChaCha8 stream. The seed of a stream is
//! obtained by folding a list of 64-bit labels (stage tag, position index,
//! grid index, ...) into the master seed with the SplitMix64 finalizer:
//!
//! ```text
//! state = master
//! for label in labels: state = splitmix64(state ^ splitmix64(label + GOLDEN))
//! ```
//!
//! Streams derived from distinct label paths are statistically independent,
//! and results never depend on the order in which parallel workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold `labels` into `master` to obtain a child seed.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(master, |state, &label| {
        splitmix64(state ^ splitmix64(label.wrapping_add(GOLDEN)))
    })
}

/// Open the stream addressed by `labels` under `master`.
pub fn stream(master: u64, labels: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(master, labels))
}

/// Stage tags used by the pipeline when deriving streams.
pub mod stage {
    pub const SIMULATE: u64 = 1;
    pub const MC_LIP: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const BOUND: u64 = 4;
    pub const VALIDATE: u64 = 5;
    pub const FORECAST: u64 = 6;
    pub const PIT: u64 = 7;
}
