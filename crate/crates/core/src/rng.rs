//! Counter-based random substreams.
//!
//! Every random draw in the crate that must be reproducible independently of
//! evaluation order is keyed by a tuple of integers. The key is folded
//! through SplitMix64 into a ChaCha seed, so `(seed, sample, node, t)` always
//! yields the same value no matter which worker asks for it or when.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered key into a single 64-bit seed.
pub fn mix(keys: &[u64]) -> u64 {
    let mut h = 0x6A09_E667_F3BC_C909u64;
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k));
    }
    h
}

/// Independent generator for the given key.
pub fn substream(keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(keys))
}

/// One standard-normal draw determined entirely by `keys`.
pub fn keyed_normal(keys: &[u64]) -> f64 {
    StandardNormal.sample(&mut substream(keys))
}

/// Domain tags keep streams for different purposes disjoint.
pub mod tag {
    pub const SCM_NOISE: u64 = 0x5C4D;
    pub const LATENT: u64 = 0x1A7E;
    pub const TRAIN: u64 = 0x7A19;
    pub const INIT: u64 = 0x1217;
    pub const COEFFS: u64 = 0xC0EF;
    pub const EVAL: u64 = 0xE7A1;
}
