//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a [`DetRng`], which is ChaCha
//! with 8 rounds (`rand_chacha::ChaCha8Rng`) seeded through
//! `SeedableRng::seed_from_u64`. Both the stream cipher and the u64 seed
//! expansion are specified by their crates and are platform independent, so
//! a seed reproduces the same stream everywhere. Gaussian draws use
//! `rand_distr::StandardNormal` (ziggurat).
//!
//! Independent stages never share a stream. A stage's seed is derived from
//! a master seed and a purpose tag with [`derive_seed`]: the first eight
//! bytes (little endian) of `SHA-256(master_le_bytes || tag_utf8)`. Changing
//! how much randomness one stage consumes therefore never perturbs another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::embedding::{l2_normalize, EmbeddingVector};

pub type DetRng = ChaCha8Rng;

/// Seed for purpose `tag` under `master`.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn seeded(seed: u64) -> DetRng {
    DetRng::seed_from_u64(seed)
}

/// Stream for purpose `tag` under `master`.
pub fn stream(master: u64, tag: &str) -> DetRng {
    seeded(derive_seed(master, tag))
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Uniform draw from the unit sphere in `R^dim` (normalized Gaussian).
pub fn unit_sphere<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> EmbeddingVector {
    loop {
        let g = EmbeddingVector::from_vec_unchecked(standard_normal_vec(rng, dim));
        // A zero Gaussian vector has probability zero; redraw if it happens.
        if let Ok(v) = l2_normalize(&g) {
            return v;
        }
    }
}

/// Partial Fisher-Yates shuffle: after the call, `items[..k]` is a uniform
/// sample without replacement. Draw `i` picks `j = random_range(i..n)`.
pub fn partial_shuffle<T, R: Rng + ?Sized>(items: &mut [T], k: usize, rng: &mut R) {
    let n = items.len();
    for i in 0..k.min(n) {
        let j = rng.random_range(i..n);
        items.swap(i, j);
    }
}

/// Full Fisher-Yates shuffle with the same draw convention as [`partial_shuffle`].
pub fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    let n = items.len();
    partial_shuffle(items, n, rng);
}
