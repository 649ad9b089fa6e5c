//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator. The 256-bit key is derived from the
//! master seed with `ChaCha8Rng::seed_from_u64` (PCG32 expansion) and the
//! 64-bit stream id is `stage << 8 | purpose`, so stages and purposes get
//! independent streams and adding a stage never perturbs earlier ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for within a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Gates = 3,
    Augment = 4,
    Dataset = 5,
    DatasetTest = 6,
}

pub fn stream(master_seed: u64, stage: u64, purpose: Purpose) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((stage << 8) | purpose as u64);
    rng
}

/// Derives the seed of stage `stage` from a plan's master seed.
pub fn stage_seed(master_seed: u64, stage: u64) -> u64 {
    // SplitMix64 finaliser over (master, stage).
    let mut z = master_seed ^ stage.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Serializable position of a [`StreamRng`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &StreamRng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
