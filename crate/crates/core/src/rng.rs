//! Seed derivation for reproducible random streams.
//!
//! Every stream is a `ChaCha8Rng` seeded from a 64-bit value derived from
//! `(master_seed, label, index)` with FNV-1a over the label and SplitMix64
//! finalization. The generator name is written into corpus headers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GENERATOR_NAME: &str = "chacha8+splitmix64-derive";

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let a = splitmix64(master ^ fnv1a(label));
    splitmix64(a ^ splitmix64(index))
}

pub fn stream(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, index))
}
