//! Seeded, splittable random streams.
//!
//! Every stochastic routine takes an explicit stream so that identical seeds
//! give bit-identical runs, including under data-parallel execution: parallel
//! workers never share a stream, they derive child streams by index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::field::DenseField;

pub type Stream = ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates seed/index mixtures.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(mix(seed))
}

/// Child stream `index` of a parent seed; children are mutually independent.
pub fn child_stream(seed: u64, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ mix(index.wrapping_add(0x517c_c1b7_2722_0a95))))
}

/// Field of i.i.d. standard normal draws.
pub fn normal_field(rng: &mut Stream, h: usize, w: usize, c: usize) -> DenseField {
    let mut out = DenseField::zeros(h, w, c);
    for v in out.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    out
}

/// Field of i.i.d. uniform draws in [lo, hi).
pub fn uniform_field(rng: &mut Stream, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> DenseField {
    let mut out = DenseField::zeros(h, w, c);
    for v in out.data_mut() {
        *v = rng.gen_range(lo..hi);
    }
    out
}
