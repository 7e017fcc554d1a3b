//! Shared fixtures for the benchmarks.

use dcnalign::rng::SplitMix64;
use dcnalign::{ConvKernel, FeatureMap, OffsetField, Tensor};

pub fn random_vec(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    rng.fill_uniform(&mut v, lo, hi);
    v
}

/// Input, `n × n` kernel and offsets in `[-3, 3]` for a `c × s × s` layer
/// with `g` offset groups.
pub fn layer(
    c: usize,
    s: usize,
    n: usize,
    g: usize,
    seed: u64,
) -> (FeatureMap, ConvKernel, OffsetField) {
    let mut rng = SplitMix64::new(seed);
    let x = FeatureMap::from_vec(c, s, s, random_vec(&mut rng, c * s * s, -1.0, 1.0))
        .expect("valid dims");
    let k = ConvKernel::from_vec(c, c, n, random_vec(&mut rng, c * c * n * n, -1.0, 1.0))
        .expect("valid dims");
    let off = OffsetField::new(
        Tensor::from_vec(
            &[g, n * n, 2, s, s],
            random_vec(&mut rng, g * n * n * 2 * s * s, -3.0, 3.0),
        )
        .expect("valid dims"),
    )
    .expect("finite offsets");
    (x, k, off)
}
