//! Labelled random streams derived from one root seed.
//!
//! Every consumer of randomness asks for its own stream by a stable label, so adding a new
//! consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for the stream `(root, label, index)`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut s = splitmix64(root);
    s = splitmix64(s ^ fnv1a(label.as_bytes()));
    splitmix64(s ^ index.wrapping_mul(0xA24B_AED4_963E_E407))
}

pub fn stream(root: u64, label: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, label, index))
}
