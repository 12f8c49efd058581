//! Seed derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by a
//! base seed plus a short list of tags (epoch, object id, purpose, ...), so
//! results never depend on iteration order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// A ChaCha8 generator for the stream `(base, tags)`.
pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Purpose tags used when deriving streams.
pub mod tag {
    pub const SUBSAMPLE: u64 = 1;
    pub const AUG_A: u64 = 2;
    pub const AUG_B: u64 = 3;
    pub const MASK_TTA: u64 = 4;
    pub const MASK_PTA: u64 = 5;
    pub const DROP_PATH: u64 = 6;
    pub const AUG_RGB: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const INIT: u64 = 9;
    pub const CODEBOOK: u64 = 10;
    pub const TRIPLET: u64 = 11;
    pub const SYNTH: u64 = 12;
    pub const FPS: u64 = 13;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
