//! Counter-based random streams keyed by `(master seed, run, step, slot)`.
//!
//! Every key addresses its own disjoint window of the ChaCha8 keystream, so
//! the draws for run `i` at step `t` never depend on how many runs exist or
//! in which order they execute.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a stream is used for within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DrawSlot {
    InitialState = 0,
    Process = 1,
    Measurement = 2,
}

const SLOTS: u128 = 4;
/// 32-bit words reserved per (step, slot) window.
const WINDOW_BITS: u32 = 32;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub master_seed: u64,
    pub run: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, run: u64) -> Self {
        Self { master_seed, run }
    }

    fn key_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        let mut z = self.master_seed;
        for chunk in out.chunks_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        out
    }

    /// Generator positioned at the start of the `(step, slot)` window.
    pub fn stream(&self, step: u64, slot: DrawSlot) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key_bytes());
        rng.set_stream(self.run);
        let block = (step as u128) * SLOTS + slot as u128;
        rng.set_word_pos(block << WINDOW_BITS);
        rng
    }

    /// `n` independent standard normal draws for `(step, slot)`.
    pub fn standard_normals(&self, step: u64, slot: DrawSlot, n: usize) -> DVector<f64> {
        let mut rng = self.stream(step, slot);
        DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
    }
}
