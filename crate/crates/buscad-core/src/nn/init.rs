//! Weight initialization.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::Arr;

/// Kaiming-normal fan-in initialization for convolution weights.
pub fn kaiming_conv(rng: &mut impl Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> Arr {
    let std = (2.0 / (cin * kh * kw) as f32).sqrt();
    Arr::from_shape_fn(ndarray::IxDyn(&[cout, cin, kh, kw]), |_| {
        let z: f32 = StandardNormal.sample(rng);
        z * std
    })
}

/// Kaiming-normal fan-in initialization for linear weights (O, F).
pub fn kaiming_linear(rng: &mut impl Rng, out: usize, fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f32).sqrt();
    Arr::from_shape_fn(ndarray::IxDyn(&[out, fan_in]), |_| {
        let z: f32 = StandardNormal.sample(rng);
        z * std
    })
}
