//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha::ChaCha8Rng`).
//! A user seed `s` is expanded with `ChaCha8Rng::seed_from_u64(s)` and each
//! consumer then selects its own ChaCha stream with `set_stream(id)`, where
//! `id` is the fixed [`Stream`] discriminant. Two consumers given the same
//! seed therefore never share a keystream, and adding a new consumer never
//! shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Mask = 1,
    Noise = 2,
    Params = 3,
    Phantom = 4,
    Sampling = 5,
    Crop = 6,
    Test = 7,
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
