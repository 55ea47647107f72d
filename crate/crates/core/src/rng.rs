//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream identified by
//! `(seed, label, index)`. The stream is ChaCha8 keyed by
//! `SplitMix64(seed ^ FNV-1a-64(label))` expanded to 256 bits, with `index`
//! used as the ChaCha stream id. Streams are therefore independent of thread
//! scheduling and call order, and any re-implementation following this recipe
//! reproduces the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// One SplitMix64 step; returns the output and advances `state`.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Opens the stream `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> Stream {
    let mut state = seed ^ fnv1a64(label.as_bytes());
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Derives a child seed, e.g. a per-scene seed from a run seed.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut state = seed ^ fnv1a64(label.as_bytes()) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93);
    splitmix64(&mut state)
}
