//! Seeded random streams. Every stochastic component draws from a
//! `ChaCha8Rng` derived from the run seed and a purpose-specific stream id,
//! so results never depend on ambient entropy or on call interleaving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 1;
    pub const TASK: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const TRAIN_DATA: u64 = 10;
    pub const PRUNE_DATA: u64 = 11;
    pub const FINETUNE_DATA: u64 = 12;
    pub const GATES: u64 = 20;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent stream for one training step of one stage.
pub fn for_step(seed: u64, stream: u64, step: usize) -> Rng {
    let mut rng = seeded(seed, stream);
    rng.set_word_pos((step as u128) << 20);
    rng
}
