//! Seed derivation.
//!
//! Every random stream is derived from one root seed plus a purpose string:
//! `sub_seed = splitmix64(root + fnv1a64(purpose))`. Streams for different
//! purposes are therefore independent of the order in which they are drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a hash; stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    splitmix64(root.wrapping_add(fnv1a64(purpose.as_bytes())))
}

pub fn rng_for(root: u64, purpose: &str) -> LabRng {
    LabRng::seed_from_u64(derive_seed(root, purpose))
}
