//! Deterministic, order-independent random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run's
//! base seed plus a domain tag and a small tuple of indices (node, round,
//! step, ...). Draws therefore never depend on the order in which nodes or
//! sweep points are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

/// Domain tags keeping streams for unrelated purposes disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Topology = 0x746f_706f,
    ZipNoise = 0x7a69_706e,
    MuffliatoNoise = 0x6d75_6666,
    Batch = 0x6261_7463,
    Data = 0x6461_7461,
    Init = 0x696e_6974,
    Partition = 0x7061_7274,
    Attack = 0x6174_746b,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed, a domain and a list of indices into a 64-bit seed.
pub fn derive_seed(base: u64, domain: Domain, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ splitmix64(domain as u64));
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// Opens the stream identified by `(base, domain, parts)`.
pub fn stream(base: u64, domain: Domain, parts: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(base, domain, parts))
}
