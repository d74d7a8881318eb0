//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a (seed, stream, index) triple, so no generator state needs
//! to be persisted to reproduce a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a stream tag and an index into a new 64-bit seed.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let tag = stream
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    splitmix64(splitmix64(seed ^ tag).wrapping_add(index))
}

pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}
