//! Seeded pseudorandom streams.
//!
//! Every random decision in the crate draws from a [`ChaCha8Rng`] whose seed
//! is derived from the run seed and a purpose label ("shuffle", "dropout",
//! "mlm-mask", ...). Two streams with different purposes never share state,
//! so adding a new consumer does not perturb existing ones.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the sub-seed for `purpose` from a run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    splitmix64(seed ^ fnv1a(purpose.as_bytes()))
}

/// A generator dedicated to one purpose within a seeded run.
pub fn stream(seed: u64, purpose: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, purpose))
}
