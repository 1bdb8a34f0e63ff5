//! Named, independently seekable random streams derived from one run seed.
//!
//! Every consumer of randomness (data, init, offsets, augmentation) draws from
//! its own ChaCha stream, keyed by the run seed and selected by a stable hash
//! of the stream name and a caller-chosen index (epoch, step, sample…). A
//! component can therefore be perturbed or resumed without shifting any
//! other component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const OFFSETS: &str = "offsets";
pub const AUGMENT: &str = "augmentation";

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_id(name: &str, index: &[u64]) -> u64 {
    // FNV-1a over the name, then fold in each index component.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    index.iter().fold(mix(h), |acc, &i| mix(acc ^ i))
}

/// Generator for stream `name` at position `index` under `seed`.
pub fn stream(seed: u64, name: &str, index: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name, index));
    rng
}
