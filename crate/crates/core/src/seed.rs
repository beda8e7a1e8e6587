//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from
//! `derive_seed(root, stream)`, where `stream` identifies the consumer
//! (record index, parameter block, epoch shuffle). The mixing function is
//! SplitMix64, so derived seeds are identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `stream` of the root seed `root`.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(root) ^ stream.wrapping_mul(GOLDEN))
}

pub fn rng(root: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream))
}

// Stream tags used across modules.
pub(crate) const STREAM_BACKBONE_INIT: u64 = 0x0B0B;
pub(crate) const STREAM_DSFE_INIT: u64 = 0xD5FE;
pub(crate) const STREAM_SHUFFLE: u64 = 0x5A0F_0000;
pub(crate) const STREAM_PROBE: u64 = 0x9B0E;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, 0), derive_seed(7, 0));
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
        // Frozen value: changing the mixer silently would break dataset reproducibility.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
