//! Deterministic, order-independent noise streams.
//!
//! Every consumer of randomness derives its own ChaCha substream from a
//! `(seed, domain, index)` triple, so work split across particles or
//! minibatches draws the same numbers regardless of scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

pub mod domain {
    pub const SIM_NOISE: u64 = 0x5349_4d5f_4e4f_4953;
    pub const SIM_X0: u64 = 0x5349_4d5f_5830_0000;
    pub const SPLIT: u64 = 0x5350_4c49_5400_0000;
    pub const INIT: u64 = 0x494e_4954_0000_0000;
    pub const SHUFFLE: u64 = 0x5348_5546_0000_0000;
    pub const CNF_BASE: u64 = 0x434e_465f_4241_5345;
    pub const VSDE_TRAIN: u64 = 0x5653_4445_5452_4e00;
    pub const INFER: u64 = 0x494e_4645_5200_0000;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Substream `index` of the stream keyed by `(seed, domain)`.
pub fn substream(seed: u64, domain: u64, index: u64) -> Stream {
    let mut key = [0u8; 32];
    let mut state = seed ^ splitmix(domain);
    for chunk in key.chunks_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

pub fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal2(rng: &mut Stream) -> [f64; 2] {
    let a = normal(rng);
    let b = normal(rng);
    [a, b]
}

pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
