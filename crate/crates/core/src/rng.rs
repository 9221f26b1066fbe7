//! Named random sub-streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

pub const CLUSTERING: &str = "clustering";
pub const INIT: &str = "init";
pub const TRAINING: &str = "training";
pub const SYNTHESIS: &str = "synthesis";

/// Deterministic generator for stage `name` under run seed `seed`.
///
/// Streams with different names are independent; the derivation is
/// FNV-1a over the name mixed with the seed through SplitMix64.
pub fn substream(seed: u64, name: &str) -> StageRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ h))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
