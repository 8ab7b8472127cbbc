//! Named, seeded random streams.
//!
//! Every random draw in the crate comes from a stream identified by a master
//! seed, a static name and a tuple of indices. The derivation is a pure
//! function, so a stream can be recreated anywhere (another thread, another
//! arm of an experiment) and yields the same values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit key for the stream `(seed, name, indices)`.
pub fn derive(seed: u64, name: &str, indices: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut key = splitmix64(seed ^ splitmix64(h));
    for &i in indices {
        key = splitmix64(key ^ splitmix64(i.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    key
}

/// Opens the stream `(seed, name, indices)`.
pub fn stream(seed: u64, name: &str, indices: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(seed, name, indices))
}

/// A single uniform draw in `[0, 1)` keyed by `(seed, name, indices)`.
///
/// Used where each draw must be addressable on its own, e.g. the Bernoulli
/// keep decision for one `(session, position)` cell.
pub fn uniform(seed: u64, name: &str, indices: &[u64]) -> f64 {
    // 53 high bits -> [0, 1)
    (derive(seed, name, indices) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
