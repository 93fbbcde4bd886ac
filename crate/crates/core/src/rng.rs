//! Counter-keyed random streams. Every stochastic decision draws from a
//! generator seeded by an explicit key, never from shared state, so results
//! do not depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains keep keys from different subsystems apart.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Domain {
    Split = 1,
    Oversample = 2,
    Augment = 3,
    Shuffle = 4,
    Dropout = 5,
    Init = 6,
    Fold = 7,
    Synth = 8,
}

pub fn keyed_rng(domain: Domain, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    for (chunk, v) in seed.chunks_exact_mut(8).zip([domain as u64, a, b, c]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
