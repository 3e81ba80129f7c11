//! Fixtures shared by the benchmarks.

use wedepth_core::substrate::{rng, Tensor};

pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    rng::normal(&mut rng::stream(seed, 0), shape, 1.0)
}
