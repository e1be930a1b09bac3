//! Seed derivation: every random stream is identified by a root seed and a
//! path of (component, index) labels, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Rng = ChaCha20Rng;

/// Stream labels used across the crate.
pub mod stream {
    pub const SUBJECT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BOOTSTRAP: u64 = 3;
    pub const REPLICATE: u64 = 4;
    pub const SYNC: u64 = 5;
    pub const DELAY: u64 = 6;
    pub const INFO: u64 = 7;
    pub const RESTART: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &label| splitmix(acc ^ splitmix(label)))
}

pub fn rng_from(seed: u64, path: &[u64]) -> Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(seed, path))
}
