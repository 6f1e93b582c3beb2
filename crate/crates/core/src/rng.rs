//! Seed derivation. Every random stream is a ChaCha8 generator keyed by a
//! seed mixed from the global seed and the stream's coordinates, so workers,
//! epochs and images draw independent, reproducible sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `hash(global, a, b)`: e.g. `(global_seed, worker_index, epoch)`.
pub fn derive_seed(global: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(global) ^ a) ^ b.rotate_left(32))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
