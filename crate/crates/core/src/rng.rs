//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit `&mut impl Rng`. Child streams
//! are derived from a master seed with a splitmix64 mix so that parallel shards
//! produce the same numbers regardless of how many threads run them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes `stream` into `master` to obtain an independent child seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child(master: u64, stream: u64) -> SimRng {
    seeded(derive_seed(master, stream))
}
