//! Keyed random streams.
//!
//! Every random decision in a run draws from a generator keyed by `(root seed, purpose,
//! coordinates)` instead of one shared stream, so results do not depend on the order in
//! which components consume randomness, and a resumed run draws exactly what an unbroken
//! run would have.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit key for `(seed, purpose, a, b)`.
pub fn derive(seed: u64, purpose: &str, a: u64, b: u64) -> u64 {
    // FNV-1a over the purpose label
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in purpose.bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(splitmix(seed ^ h) ^ a) ^ b.rotate_left(17))
}

pub fn stream(seed: u64, purpose: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, purpose, a, b))
}
