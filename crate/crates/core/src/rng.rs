//! Seeded RNG helpers. Every random draw in the crate goes through a
//! ChaCha stream derived from an explicit 64-bit seed, so runs are
//! reproducible bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for a seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from a parent seed and a label, so independent
/// consumers (datasets, init, shuffling) get decorrelated streams.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the parent seed.
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Fill with uniform draws from `[-scale, scale]`.
pub fn fill_uniform(rng: &mut ChaCha8Rng, buf: &mut [f64], scale: f64) {
    for v in buf.iter_mut() {
        *v = rng.gen_range(-scale..=scale);
    }
}

/// Standard-normal draws via Box-Muller (avoids a distribution dep).
pub fn fill_normal(rng: &mut ChaCha8Rng, buf: &mut [f64], std: f64) {
    let mut i = 0;
    while i < buf.len() {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        buf[i] = r * theta.cos() * std;
        i += 1;
        if i < buf.len() {
            buf[i] = r * theta.sin() * std;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = rng(42);
        let mut b = rng(42);
        let mut xa = [0.0; 16];
        let mut xb = [0.0; 16];
        fill_uniform(&mut a, &mut xa, 1.0);
        fill_uniform(&mut b, &mut xb, 1.0);
        assert_eq!(xa, xb);
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(7, "init"), derive_seed(7, "data"));
        assert_eq!(derive_seed(7, "init"), derive_seed(7, "init"));
    }
}
