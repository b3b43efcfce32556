use rand::Rng;

use super::scalar::Float;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// 1-D tent filter of an integer upsampling `factor`, length `2·factor − factor mod 2`.
pub fn tent_weights(factor: usize) -> Vec<f64> {
    let size = 2 * factor - factor % 2;
    let center = if size % 2 == 1 {
        (factor - 1) as f64
    } else {
        factor as f64 - 0.5
    };
    (0..size)
        .map(|i| 1.0 - (i as f64 - center).abs() / factor as f64)
        .collect()
}

/// Depthwise transposed-convolution kernel `[channels, 1, k, k]` that performs
/// bilinear interpolation by `factor`.
pub fn bilinear_kernel<T: Float>(factor: usize, channels: usize) -> Result<Tensor<T>> {
    if factor == 0 || channels == 0 {
        return Err(Error::invalid("bilinear_kernel", "factor and channels must be >= 1"));
    }
    let tent = tent_weights(factor);
    let k = tent.len();
    Ok(Tensor::from_fn([channels, 1, k, k], |i| {
        let (y, x) = ((i / k) % k, i % k);
        T::from_f64_lossy(tent[y] * tent[x])
    }))
}

/// He-normal initialization for a convolution feeding a ReLU.
pub fn he_normal<T: Float>(out_ch: usize, in_ch: usize, k: usize, rng: &mut impl Rng) -> Tensor<T> {
    let fan_in = (in_ch * k * k) as f64;
    Tensor::randn([out_ch, in_ch, k, k], (2.0 / fan_in).sqrt(), rng)
}
