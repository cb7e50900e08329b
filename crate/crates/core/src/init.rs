//! Parameter initialization schemes.
//!
//! Every scheme consumes a fixed number of RNG draws per element, so a tensor
//! filled from a given stream is reproducible regardless of what other
//! parameters were initialized before it.

use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// U(-b, b) with b = sqrt(6 / fan_in); for weights feeding ReLU.
    KaimingUniform { fan_in: usize },
    /// U(-b, b) with b = sqrt(6 / (fan_in + fan_out)); for attention and
    /// plain linear projections.
    XavierUniform { fan_in: usize, fan_out: usize },
    /// N(0, std^2)
    Normal { std: f64 },
    Zeros,
    Ones,
}

pub fn init_tensor<E: Element>(shape: &[usize], init: Init, rng: &mut RngStream) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = match init {
        Init::KaimingUniform { fan_in } => {
            let b = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| E::from_real(rng.uniform_in(-b, b))).collect()
        }
        Init::XavierUniform { fan_in, fan_out } => {
            let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| E::from_real(rng.uniform_in(-b, b))).collect()
        }
        Init::Normal { std } => (0..n).map(|_| E::from_real(rng.normal_scaled(0.0, std))).collect(),
        Init::Zeros => vec![E::zero(); n],
        Init::Ones => vec![E::one(); n],
    };
    Tensor::new(shape, data).expect("length matches shape by construction")
}

/// fan_in of a conv kernel [C_out, C_in, k...] = C_in * prod(k).
pub fn conv_fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}
