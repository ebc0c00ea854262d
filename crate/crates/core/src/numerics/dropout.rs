//! Counter-based dropout masks.
//!
//! A mask is a pure function of (run seed, site path, step, per-call key), so
//! evaluation order and thread scheduling never change which units drop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Real;

/// 64-bit FNV-1a. Stable across platforms and toolchains.
pub fn hash_str(s: &str) -> u64 {
    hash_bytes(s.as_bytes())
}

pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Combines two keys (splitmix64 finalizer over a rotated xor).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dropout configuration for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DropoutCtx {
    pub rate: f64,
    /// Base key: combines run seed, step and the per-example key.
    pub key: u64,
}

impl DropoutCtx {
    pub fn disabled() -> Self {
        Self { rate: 0.0, key: 0 }
    }

    pub fn new(rate: f64, seed: u64, step: u64, example_key: u64) -> Self {
        Self {
            rate,
            key: mix(mix(seed, step), example_key),
        }
    }

    pub fn enabled(&self) -> bool {
        self.rate > 0.0
    }

    /// Scaled keep-mask for the site `path`: entries are `0` or `1/(1-rate)`.
    pub fn mask<T: Real>(&self, path: &str, len: usize) -> Vec<T> {
        keep_mask(self.rate, mix(self.key, hash_str(path)), len)
    }
}

pub fn keep_mask<T: Real>(rate: f64, key: u64, len: usize) -> Vec<T> {
    if rate <= 0.0 {
        return vec![T::one(); len];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_is_reproducible_and_site_dependent() {
        let ctx = DropoutCtx::new(0.3, 1, 2, 3);
        let a: Vec<f32> = ctx.mask("lm.0.attn", 64);
        let b: Vec<f32> = ctx.mask("lm.0.attn", 64);
        let c: Vec<f32> = ctx.mask("lm.1.attn", 64);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let scale = 1.0f32 / 0.7;
        assert!(a.iter().all(|&x| x == 0.0 || x == scale));
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let m: Vec<f64> = keep_mask(0.0, 5, 10);
        assert!(m.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn fnv_known_value() {
        // Reference value of FNV-1a 64 for "a".
        assert_eq!(hash_str("a"), 0xaf63_dc4c_8601_ec8c);
    }
}
