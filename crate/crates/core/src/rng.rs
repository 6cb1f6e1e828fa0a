//! Seeded random streams.
//!
//! Every consumer of randomness draws from ChaCha8 keyed by the run seed and
//! a distinct stream number, so each use is independent of how much
//! randomness the others consumed and results are identical across
//! platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ParamInit = 1,
    DataGen = 2,
    DataSplit = 3,
    Batches = 4,
    RandomMasks = 5,
}

/// Generator for `(seed, stream, index)`; `index` separates sub-streams such
/// as epochs.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
