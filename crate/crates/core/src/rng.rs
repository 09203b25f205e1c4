//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by `(seed, stream, index)`, so results do not depend on call
//! order, batching, or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub const GENERATOR_INIT: u64 = 1;
pub const CRITIC_INIT: u64 = 2;
pub const EPOCH_SHUFFLE: u64 = 3;
pub const CRITIC_STEP: u64 = 4;
pub const GENERATOR_STEP: u64 = 5;
pub const SAMPLE: u64 = 6;
pub const EVAL: u64 = 7;
pub const SYNTHETIC: u64 = 8;
pub const PROJECTION: u64 = 9;
pub const PCA: u64 = 10;
pub const RECALIBRATE: u64 = 11;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn stream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

pub fn normal_vec<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_tensor<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, normal_vec(rng, rows * cols))
}
