//! Seeded, stream-separated randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Scalar, Tensor};

/// ChaCha8 is counter based: `stream` selects an independent sequence for
/// the same seed, so sub-systems never share draws.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable 64-bit stream id for a textual label (FNV-1a).
pub fn label(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::raw(shape.to_vec(), data)
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect();
    Tensor::raw(shape.to_vec(), data)
}
