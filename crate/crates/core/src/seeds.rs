//! Deterministic seed splitting. Every stage and worker draws its RNG stream
//! from the root seed through [`derive_seed`], so results never depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a named stream and index under `root`.
pub fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    // FNV-1a over the stream name
    let mut tag: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        tag ^= u64::from(b);
        tag = tag.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(root ^ tag).wrapping_add(index))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
