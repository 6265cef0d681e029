//! Deterministic random streams.
//!
//! Every source of randomness derives a private stream from the experiment
//! seed plus structural counters (view id, ray id, purpose tag). Rays can
//! therefore be processed in any order or on any number of threads without
//! changing their draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams, so different consumers of the same ray
/// never share a stream.
pub mod tag {
    pub const CANDIDATE_JITTER: u64 = 1;
    pub const GAUSSIAN_BOOST: u64 = 2;
    pub const COARSE_TO_FINE: u64 = 3;
    pub const DEPTH_NOISE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const RAY_PICK: u64 = 7;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an arbitrary list of counters into one 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut state = 0x6A09_E667_F3BC_C909; // sqrt(2) fraction bits
    let mut acc = 0u64;
    for &p in parts {
        state ^= p;
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Stream for per-ray work: (seed, view, ray index, purpose tag).
pub fn ray_stream(seed: u64, view: u64, ray: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, view, ray, purpose]))
}

/// Stream for non-ray work (initialization, patch picks, noise, ...).
pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, purpose, index]))
}
