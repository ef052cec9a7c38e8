//! Counter-based, splittable random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream `stream` of run `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Well-known stream ids so that components never share draws.
pub mod streams {
    pub const SIGMA_TRAIN: u64 = 1;
    pub const SIGMA_EVAL: u64 = 2;
    pub const TRAINING: u64 = 3;
    pub const OSI_INIT: u64 = 4;
    pub const EVALUATION: u64 = 5;
    pub const SIRSA: u64 = 6;
}
