//! Deterministic RNG streams derived from a single root seed.
//!
//! Every source of randomness in a run (data generation, per-path weight
//! init, sigma-training batch mixing, attack image selection, bootstrap
//! resampling) draws from its own named stream. Streams are independent of
//! execution order, so training paths sequentially or in parallel yields
//! identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed a ChaCha stream from `(root_seed, label)`.
pub fn stream(root_seed: u64, label: &str) -> ChaCha8Rng {
    let mut state = splitmix64(root_seed ^ splitmix64(fnv1a(label.as_bytes())));
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Derive a child root seed, for nesting streams (e.g. one seed per sample).
pub fn child_seed(root_seed: u64, label: &str) -> u64 {
    splitmix64(root_seed ^ splitmix64(fnv1a(label.as_bytes())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(42, "data/train");
        let mut b = stream(42, "data/train");
        for _ in 0..16 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn labels_are_independent() {
        let mut a = stream(42, "data/train");
        let mut b = stream(42, "data/test");
        let va: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        assert_ne!(va, vb);
    }
}
