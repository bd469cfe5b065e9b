//! Seeded random streams. Every consumer of randomness draws from its own
//! ChaCha stream so that adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) mod tags {
    pub const ID_TRAIN: u64 = 1;
    pub const ID_TEST: u64 = 2;
    pub const ID_VAL: u64 = 3;
    pub const OOD_AUX: u64 = 4;
    pub const OOD_TEST: u64 = 5;
    pub const OOD_VAL: u64 = 6;
    pub const INIT: u64 = 10;
    pub const PRETRAIN: u64 = 11;
    pub const FINETUNE_IN: u64 = 12;
    pub const FINETUNE_OUT: u64 = 13;
}

/// Independent stream `tag` of the generator seeded with `seed`.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}
