//! Deterministic, addressable random number streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(seed, purpose, indices...)`, so the draw a given subject sees at a given
//! iteration does not depend on evaluation order or thread count, and an
//! identical configuration replays bit for bit.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream purposes; part of the stream address, so draws for different uses
/// never collide even with equal indices.
pub mod tag {
    pub const SIM_ETA: u64 = 1;
    pub const SIM_OBS: u64 = 2;
    pub const ELBO: u64 = 3;
    pub const IS: u64 = 4;
    pub const MINIBATCH: u64 = 5;
    pub const INIT: u64 = 6;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha8 stream addressed by seed and tags.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xE703_7ED1_A0B4_28DB);
        acc ^= splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    let mut s = acc;
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Stream key for a subject, derived from its id (FNV-1a) rather than its
/// position, so a subject keeps its draws when the population is reordered
/// or contains duplicates.
pub fn subject_key(id: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in id.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
