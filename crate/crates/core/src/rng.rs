//! Named seed streams.
//!
//! Every source of randomness in the workbench draws from ChaCha8 keyed by a
//! user seed and a fixed stream id, so that e.g. the training seed and the
//! proposal seed can never alias even when they share a numeric value.
//! ChaCha8 output is specified bit-for-bit, which keeps splits and traces
//! portable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent randomness consumers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Synthetic,
    Split,
    Subsample,
    /// Parameter initialization (seeded by xi).
    Init,
    /// Minibatch shuffling (seeded by xi).
    Shuffle,
    /// Training-time dropout masks (seeded by xi).
    Dropout,
    /// Acquisition-time randomness (seeded by zeta).
    Acquisition,
    /// SA proposals and acceptance draws.
    Search,
    /// k-means++ seeding.
    Bins,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Synthetic => 1,
            Stream::Split => 2,
            Stream::Subsample => 3,
            Stream::Init => 4,
            Stream::Shuffle => 5,
            Stream::Dropout => 6,
            Stream::Acquisition => 7,
            Stream::Search => 8,
            Stream::Bins => 9,
        }
    }
}

/// Deterministic generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Generator for `(seed, stream)` further split by a sub-index, e.g. the
/// acquisition iteration. The sub-index is folded into the seed with a
/// SplitMix64 step so neighbouring sub-indices give unrelated keys.
pub fn rng_for_sub(seed: u64, stream: Stream, sub: u64) -> ChaCha8Rng {
    rng_for(splitmix64(seed ^ splitmix64(sub.wrapping_add(0x51_7c_c1_b7))), stream)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
