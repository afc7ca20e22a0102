//! Counter-based RNG streams.
//!
//! Every random draw in an experiment comes from a ChaCha8 generator whose
//! 256-bit seed is derived from `(root_seed, key...)` with SplitMix64. The key
//! is the position in the sweep grid (sweep point, trial, record, ...), so the
//! stream a unit of work sees never depends on which thread ran it or in what
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for the stream identified by `key` under `seed`.
pub fn stream(seed: u64, key: &[u64]) -> StreamRng {
    let mut state = seed;
    // absorb the key, one splitmix round per word
    for &k in key {
        state = splitmix64(&mut state) ^ k.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    }
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
