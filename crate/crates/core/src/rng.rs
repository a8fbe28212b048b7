//! Counter-based noise streams.
//!
//! Every random draw is addressed by a key (seed, training step, sequence,
//! timestep, entity, role) and produced by a ChaCha stream derived from that
//! key alone, so results do not depend on evaluation order or sharding.

use alloc::vec::Vec;

use rand::distr::{Distribution, Open01};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::array::Array;

/// What a draw is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseRole {
    /// Standard normals for the latent `z` reparameterization.
    Latent,
    /// Uniforms for the Gumbel-Softmax sample of the child label `y`.
    ChildLabel,
    /// Uniforms for the Gumbel-Softmax sample of the parent label `c`.
    ParentLabel,
    /// Standard normals for sampling an observation from the decoder.
    Observation,
    /// Uniforms for a dropout mask at the given site.
    Dropout(u32),
}

impl NoiseRole {
    fn code(self) -> u64 {
        match self {
            NoiseRole::Latent => 1,
            NoiseRole::ChildLabel => 2,
            NoiseRole::ParentLabel => 3,
            NoiseRole::Observation => 4,
            NoiseRole::Dropout(site) => 5 | ((site as u64) << 8),
        }
    }
}

/// Source of the external noise a model step consumes.
pub trait NoiseSource {
    /// `1 x n` standard normals.
    fn normals(&mut self, t: usize, entity: usize, role: NoiseRole, n: usize) -> Array;
    /// `1 x n` uniforms on the open interval (0, 1).
    fn uniforms(&mut self, t: usize, entity: usize, role: NoiseRole, n: usize) -> Array;
}

/// Keyed noise for one sequence at one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyedNoise {
    pub seed: u64,
    pub step: u64,
    pub sequence: u64,
}

impl KeyedNoise {
    pub fn new(seed: u64, step: u64, sequence: u64) -> Self {
        KeyedNoise {
            seed,
            step,
            sequence,
        }
    }

    fn rng(&self, t: usize, entity: usize, role: NoiseRole) -> ChaCha8Rng {
        stream_rng(&[
            self.seed,
            self.step,
            self.sequence,
            t as u64,
            entity as u64,
            role.code(),
        ])
    }
}

impl NoiseSource for KeyedNoise {
    fn normals(&mut self, t: usize, entity: usize, role: NoiseRole, n: usize) -> Array {
        let mut rng = self.rng(t, entity, role);
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Array::row(&v)
    }

    fn uniforms(&mut self, t: usize, entity: usize, role: NoiseRole, n: usize) -> Array {
        let mut rng = self.rng(t, entity, role);
        let v: Vec<f64> = (0..n).map(|_| Open01.sample(&mut rng)).collect();
        Array::row(&v)
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha stream keyed by an arbitrary list of words.
pub fn stream_rng(words: &[u64]) -> ChaCha8Rng {
    let mut state = [0x243F_6A88_85A3_08D3u64, 0x1319_8A2E_0370_7344, 0xA409_3822_299F_31D0, 0x082E_FA98_EC4E_6C89];
    for (i, &w) in words.iter().enumerate() {
        let lane = i % 4;
        state[lane] = splitmix64(state[lane] ^ splitmix64(w.wrapping_add(i as u64)));
        state[(lane + 1) % 4] ^= splitmix64(state[lane]);
    }
    let mut key = [0u8; 32];
    for (lane, chunk) in state.iter().zip(key.chunks_mut(8)) {
        chunk.copy_from_slice(&splitmix64(*lane).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// 64-bit FNV-1a; stable across platforms and builds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
