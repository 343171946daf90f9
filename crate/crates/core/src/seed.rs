//! Seed expansion. One user-facing seed is split into independent
//! ChaCha streams so that, e.g., changing the batch order never perturbs
//! parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Batching = 2,
    Masking = 3,
    Dropout = 4,
    Synthetic = 5,
}

/// RNG for `stream`, further split by `index` (epoch, expert, worker, …).
pub fn rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
