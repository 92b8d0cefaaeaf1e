//! Shared inputs for the benchmarks.

pub use cats_core;

use cats_core::Tensor;

/// Deterministic pseudo-random values in [0, 1).
pub fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 24) as f32
        })
        .collect()
}

pub fn input(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::from_vec(shape, noise(shape.iter().product(), seed)).unwrap()
}

/// A solid ball of the given radius, centred in a cube of side `n`.
pub fn ball(n: usize, radius: f64, offset: f64) -> Vec<bool> {
    let c = n as f64 / 2.0 + offset;
    let mut out = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d2 = [z, y, x].iter().map(|&v| (v as f64 + 0.5 - c).powi(2)).sum::<f64>();
                out.push(d2 <= radius * radius);
            }
        }
    }
    out
}
