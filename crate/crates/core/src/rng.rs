//! Named random substreams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of randomness. Each gets its own ChaCha stream so that
/// changing how much one consumer draws never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substream {
    Init = 1,
    Gumbel = 2,
    Batches = 3,
    KMeans = 4,
    Synthetic = 5,
    Rotation = 6,
    Duplicates = 7,
}

pub fn substream(seed: u64, stream: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Substream further keyed by an index (e.g. the epoch number).
pub fn indexed_substream(seed: u64, stream: Substream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)));
    rng.set_stream(stream as u64);
    rng
}

/// Seed for restart `index` of a run; restart 0 keeps the run seed.
pub fn restart_seed(seed: u64, index: u64) -> u64 {
    if index == 0 {
        seed
    } else {
        splitmix64(seed ^ splitmix64(index.wrapping_add(0x5eed)))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
