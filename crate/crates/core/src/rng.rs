//! Seeded random streams. Every consumer derives its own stream from the run
//! seed and a fixed name so adding a consumer never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named substream of `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, name))
}

/// Substream further keyed by an index (epoch, clip, ...).
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(splitmix(mix(seed, name) ^ splitmix(index.wrapping_add(0x9e37))))
}

fn mix(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
