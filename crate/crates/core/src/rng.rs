//! Seed derivation so every sample and stream owns an independent generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a named stream and an index.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = splitmix(seed);
    for b in stream.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ splitmix(index))
}

pub fn stream_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
