//! Seeded random streams. Every consumer derives its own stream from the run
//! seed and a role label, so adding a module never shifts another module's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a over the label, mixed with the seed.
fn mix(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, label: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix(seed, label))
}

/// Tensor of i.i.d. draws from `U[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}
