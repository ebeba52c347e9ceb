//! Reproducible seed derivation.
//!
//! Every random stream in a run is derived from one master seed:
//! `derive_seed(master, stream, index) = splitmix64(master ^ splitmix64(fnv1a(stream) ^ index))`.
//! Both mixing functions are defined on `u64` bit patterns only, so the same
//! master seed yields the same streams on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(stream.as_bytes()) ^ index))
}

/// A ChaCha8 generator for the named stream.
pub fn rng_for(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
