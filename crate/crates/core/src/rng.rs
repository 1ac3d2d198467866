//! Seeded random streams.
//!
//! Every logical stream (design, weights, labels, holdouts, Monte Carlo trial
//! `k`, ...) owns its own generator. The sub-seed of a stream is
//! `splitmix64(master ^ splitmix64(tag_id) ^ splitmix64(index + 1) * GOLDEN)`
//! and seeds a ChaCha8 generator (`rand_chacha::ChaCha8Rng`), whose output is
//! specified bit-for-bit and identical across platforms. Streams never share
//! state, so trials may be evaluated in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Tags for independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Design,
    Weight,
    Labels,
    SignHoldout,
    PlattHoldout,
    Test,
    Noise,
    Trial,
    Estimate,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Design => 1,
            Stream::Weight => 2,
            Stream::Labels => 3,
            Stream::SignHoldout => 4,
            Stream::PlattHoldout => 5,
            Stream::Test => 6,
            Stream::Noise => 7,
            Stream::Trial => 8,
            Stream::Estimate => 9,
        }
    }
}

/// One round of the SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the sub-seed for `(master, stream, index)`.
pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.id()) ^ splitmix64(index.wrapping_add(1)).wrapping_mul(GOLDEN))
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Generator seeded directly from a raw seed (used by operations that take a plain `u64`).
pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed))
}
