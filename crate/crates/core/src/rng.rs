//! Seedable, splittable randomness.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a 64-bit
//! seed (expanded with `SeedableRng::seed_from_u64`) and selected by a 64-bit
//! stream number. Independent consumers use distinct stream numbers, so a
//! stream can be recreated from `(seed, stream)` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream used for parameter initialisation.
pub const STREAM_INIT: u64 = 0;
/// Training epoch `e` draws from stream `STREAM_EPOCH_BASE + e`.
pub const STREAM_EPOCH_BASE: u64 = 1 << 32;
/// Per-symbol frame embeddings of a synthetic task.
pub const STREAM_SYMBOLS: u64 = 1 << 33;
/// Split `i` (train, dev, test) of a synthetic task draws from
/// `STREAM_SPLIT_BASE + i`.
pub const STREAM_SPLIT_BASE: u64 = (1 << 33) + 1;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
