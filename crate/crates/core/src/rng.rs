//! Seed-addressable random streams.
//!
//! Every random draw in the kit comes from a SplitMix64 generator whose seed
//! is a hash of `(seed, key...)`. Per-item streams make generation order
//! independent, so a sample or augmentation copy can be regenerated in
//! isolation.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of keys into a single stream seed.
pub fn stream_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(seed), |acc, &k| mix64(acc ^ mix64(k)))
}

/// Generator for the stream identified by `(seed, keys)`.
pub fn stream(seed: u64, keys: &[u64]) -> SplitMix64 {
    SplitMix64::seed_from_u64(stream_seed(seed, keys))
}

// Domain tags keep streams of different subsystems apart even when their
// numeric keys collide.
pub(crate) const TAG_SCENE: u64 = 0x5343_454E;
pub(crate) const TAG_AUGMENT: u64 = 0x4155_474D;
pub(crate) const TAG_INIT: u64 = 0x494E_4954;
pub(crate) const TAG_SHUFFLE: u64 = 0x5348_5546;
