//! Deterministic seed partitioning.
//!
//! Every stochastic component derives its generator from a root seed plus a
//! path of stream indices (chain, patient, draw, ...), so work can be split
//! across threads without changing any output.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type SimRng = Xoshiro256PlusPlus;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a stream index into a seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn rng_from(seed: u64, path: &[u64]) -> SimRng {
    let s = path.iter().fold(seed, |acc, &p| sub_seed(acc, p));
    SimRng::seed_from_u64(s)
}
