//! Seed lineage: every random stream is a ChaCha8 generator keyed by a
//! deterministic mix of the run seed and a path of stream labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels, so independent consumers never share a seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const F_NET: u64 = 2;
    pub const Z_NET: u64 = 3;
    pub const TRUTH: u64 = 4;
    pub const METRICS: u64 = 5;
    pub const TRIAL: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each label in turn.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}
