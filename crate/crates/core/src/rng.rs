//! Counter-based seeding.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! user seed and a stream id, so any (seed, epoch) or (seed, sigma, trial)
//! generator can be rebuilt directly without replaying earlier draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs two 32-bit coordinates into one stream id.
pub fn stream_id(hi: usize, lo: usize) -> u64 {
    ((hi as u64) << 32) | (lo as u64 & 0xffff_ffff)
}
