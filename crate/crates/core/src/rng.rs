//! Named sub-seeds. Every random stream in the crate is derived from one run
//! seed plus a stable name, so components can be replayed independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Float, Tensor};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the parent seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, name))
}

/// Zero-mean normal tensor; the stream depends only on `(seed, name)`.
pub fn normal_tensor<T: Float>(shape: Vec<usize>, std: f64, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = rng_for(seed, name);
    let dist = Normal::new(0.0, std).expect("finite std");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::of(dist.sample(&mut rng))).collect();
    Tensor::new(shape, data).expect("shape matches element count")
}
