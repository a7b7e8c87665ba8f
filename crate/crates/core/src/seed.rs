//! Deterministic seed derivation. Every random stream in an experiment is
//! keyed off one master seed plus a purpose label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a parent seed and a stream label.
pub fn derive(parent: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(mix64(parent), |acc, b| mix64(acc ^ u64::from(b)))
}

pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    mix64(derive(parent, label) ^ mix64(index))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Uniform value in `[0, 1)` from a hash of the inputs.
pub fn unit_hash(parts: &[u64]) -> f64 {
    let h = parts.iter().fold(0x5EED_u64, |acc, &p| mix64(acc ^ p));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_ne!(derive(7, "corpus"), derive(7, "stream"));
        assert_eq!(derive(7, "corpus"), derive(7, "corpus"));
        assert_ne!(derive_indexed(7, "visit", 0), derive_indexed(7, "visit", 1));
    }

    #[test]
    fn unit_hash_in_range() {
        for i in 0..1000 {
            let u = unit_hash(&[i, 3]);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
