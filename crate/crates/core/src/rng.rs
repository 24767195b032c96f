//! Seed derivation. A run has one master seed; child streams are split off
//! in a fixed order: parameter init, then data, then dropout.

use rand::{RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};

/// Child seeds derived from a master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPlan {
    pub init: u64,
    pub data: u64,
    pub dropout: u64,
}

impl SeedPlan {
    pub fn from_master(seed: u64) -> Self {
        let mut root = ChaCha20Rng::seed_from_u64(seed);
        let init = root.next_u64();
        let data = root.next_u64();
        let dropout = root.next_u64();
        SeedPlan {
            init,
            data,
            dropout,
        }
    }
}

/// Generator for one indexed item of a stream, e.g. sample `index` of a
/// dataset or step `index` of a training run. Independent of every other
/// index, so items can be produced in any order.
pub fn indexed(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Like [`indexed`] with a second coordinate (e.g. step and sample).
pub fn indexed2(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut mix = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    mix.set_stream(a);
    let s = mix.next_u64();
    indexed(s, b)
}
