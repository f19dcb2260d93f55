//! Deterministic, counter-keyed random streams.
//!
//! Every source of randomness in the crate draws from a ChaCha8 stream whose
//! 256-bit key is built from `(base seed, domain, x, y)`. Streams for
//! different keys are independent, so augmenting channels in any order, or
//! concurrently, produces identical results.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Domain tags keep unrelated consumers of the same base seed independent.
pub const DOMAIN_AUGMENT: u32 = 1;
pub const DOMAIN_SHUFFLE: u32 = 2;
pub const DOMAIN_NOISE: u32 = 3;
pub const DOMAIN_INIT: u32 = 4;
pub const DOMAIN_SYNTH: u32 = 5;
pub const DOMAIN_SUBSET: u32 = 6;
pub const DOMAIN_GRADCHECK: u32 = 7;

/// A seeded stream for `(seed, domain, x, y)`. The key layout is fixed:
/// little-endian `seed | domain | x | y` padded with zeros.
pub fn stream(seed: u64, domain: u32, x: u64, y: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&domain.to_le_bytes());
    key[12..20].copy_from_slice(&x.to_le_bytes());
    key[20..28].copy_from_slice(&y.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform integer in `[0, n)` via the widening-multiply map.
///
/// Bias is below 2^-53 for the desk-scale ranges used here, and the
/// construction is stable across dependency upgrades.
pub fn uniform_usize(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fair coin.
pub fn coin(rng: &mut ChaCha8Rng) -> bool {
    rng.next_u64() & 1 == 1
}

/// In-place Fisher-Yates shuffle driven by an explicit stream.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_usize(rng, i + 1);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7, DOMAIN_AUGMENT, 3, 9);
        let mut b = stream(7, DOMAIN_AUGMENT, 3, 9);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_keys_give_distinct_streams() {
        let mut a = stream(7, DOMAIN_AUGMENT, 3, 9);
        let mut b = stream(7, DOMAIN_AUGMENT, 3, 10);
        let mut c = stream(7, DOMAIN_SHUFFLE, 3, 9);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn uniform_usize_in_range() {
        let mut rng = stream(1, DOMAIN_NOISE, 0, 0);
        for _ in 0..1000 {
            assert!(uniform_usize(&mut rng, 10) < 10);
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = stream(2, DOMAIN_SHUFFLE, 0, 0);
        let mut v: Vec<usize> = (0..100).collect();
        shuffle(&mut rng, &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, (0..100).collect::<Vec<_>>());
    }
}
