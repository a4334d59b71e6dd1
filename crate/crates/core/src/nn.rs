//! Small layer building blocks and initialization.

use rand::Rng;

use crate::autodiff::{self as ad, Tensor, TensorError};
use crate::scalar::Scalar;

/// He-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::param(shape, data).expect("valid shape")
}

/// 3x3 convolution kernel `[out, in, 3, 3]`.
pub fn conv_kernel<T: Scalar, R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Tensor<T> {
    he_uniform(&[cout, cin, 3, 3], cin * 9, rng)
}

/// Affine map `x W + b` on `[N, in]` rows.
#[derive(Debug)]
pub struct Linear<T: Scalar> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: he_uniform(&[input, output], input, rng),
            bias: Tensor::param(&[output], vec![T::zero(); output]).expect("valid shape"),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        ad::add(&ad::matmul(x, &self.weight)?, &self.bias)
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug)]
pub struct Mlp<T: Scalar> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self { hidden: Linear::new(input, hidden, rng), output: Linear::new(hidden, output, rng) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.output.forward(&ad::relu(&self.hidden.forward(x)?))
    }
}
