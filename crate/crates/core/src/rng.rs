//! Seeded, splittable random streams.
//!
//! Every consumer of randomness asks for a `(seed, stream)` pair. The
//! generator is ChaCha8, which is counter based: a stream is selected with
//! `set_stream`, so stream `k` of a seed never depends on how many values
//! were drawn from any other stream. Sample rows, training steps and dataset
//! examples each get their own stream id, which keeps results independent of
//! batching and execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream-id namespaces, so that different subsystems sharing one seed never
/// collide on a stream.
pub mod domain {
    pub const SAMPLE_ROW: u64 = 0x1000_0000_0000;
    pub const TRAIN_STEP: u64 = 0x2000_0000_0000;
    pub const DATA_EXAMPLE: u64 = 0x3000_0000_0000;
    pub const SHUFFLE: u64 = 0x4000_0000_0000;
    pub const INIT: u64 = 0x5000_0000_0000;
    pub const CLASSIFIER: u64 = 0x6000_0000_0000;
    pub const LANGEVIN_ROW: u64 = 0x7000_0000_0000;
    pub const ORACLE: u64 = 0x8000_0000_0000;
}

pub type StreamRng = ChaCha8Rng;

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_normal(rng: &mut impl Rng, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

/// Uniform in `[0, 1)`.
#[inline]
pub fn uniform(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

/// Uniform integer in `[lo, hi]` (inclusive).
#[inline]
pub fn int_inclusive(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Fisher-Yates shuffle driven by the given generator.
pub fn shuffle<T>(rng: &mut impl Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
