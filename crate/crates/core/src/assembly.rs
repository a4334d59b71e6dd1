//! Style assembly layers and self/shuffle assembly.
//!
//! A style assembly layer (SAL) re-styles content features with AdaIN
//! parameters predicted from pooled style features:
//!
//! ```text
//! gamma, beta = MLP(GAP(f_s))
//! z           = ReLU(AdaIN(K1 * f_c, gamma, beta))
//! SAL(f_c, f_s) = AdaIN(K2 * z, gamma, beta) + f_c
//! ```
//!
//! Pairing each sample's content with its own style gives self-assembly;
//! pairing it with the style of a randomly permuted batch gives
//! shuffle-assembly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{self as ad, Tensor, TensorError};
use crate::nn::{conv_kernel, Mlp};
use crate::normalization::{adain, StyleParams};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("permutation of length {perm} does not match batch size {batch}")]
    PermutationLength { perm: usize, batch: usize },
    #[error("cannot permute an empty batch")]
    EmptyPermutation,
    #[error("style width {got} does not match SAL input width {expected}")]
    StyleWidth { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameters of one style assembly layer over `C` content channels.
#[derive(Debug)]
pub struct SalParams<T: Scalar> {
    /// `[C, C, 3, 3]`
    pub k1: Tensor<T>,
    /// `[C, C, 3, 3]`
    pub k2: Tensor<T>,
    /// style width -> hidden -> `2C` (gamma then beta)
    pub mlp: Mlp<T>,
}

impl<T: Scalar> SalParams<T> {
    pub fn new<R: Rng>(channels: usize, style_width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            k1: conv_kernel(channels, channels, rng),
            k2: conv_kernel(channels, channels, rng),
            mlp: Mlp::new(style_width, hidden, 2 * channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.k1.shape()[0]
    }

    pub fn style_width(&self) -> usize {
        self.mlp.hidden.input_width()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("k1", &self.k1),
            ("k2", &self.k2),
            ("mlp.hidden.weight", &self.mlp.hidden.weight),
            ("mlp.hidden.bias", &self.mlp.hidden.bias),
            ("mlp.output.weight", &self.mlp.output.weight),
            ("mlp.output.bias", &self.mlp.output.bias),
        ]
    }
}

/// `gamma, beta = MLP(GAP(f_s))`, each `[N, C]`.
pub fn style_to_params<T: Scalar>(f_s: &Tensor<T>, sal: &SalParams<T>) -> Result<StyleParams<T>, AssemblyError> {
    let pooled = ad::global_avg_pool(f_s)?;
    let width = pooled.shape()[1];
    if width != sal.style_width() {
        return Err(AssemblyError::StyleWidth { expected: sal.style_width(), got: width });
    }
    let out = sal.mlp.forward(&pooled)?;
    let c = sal.channels();
    Ok(StyleParams { gamma: ad::slice_cols(&out, 0, c)?, beta: ad::slice_cols(&out, c, c)? })
}

/// One style assembly layer; the output has the shape of `f_c`.
pub fn sal_forward<T: Scalar>(f_c: &Tensor<T>, f_s: &Tensor<T>, sal: &SalParams<T>) -> Result<Tensor<T>, AssemblyError> {
    let params = style_to_params(f_s, sal)?;
    sal_with_params(f_c, &params, sal)
}

fn sal_with_params<T: Scalar>(f_c: &Tensor<T>, params: &StyleParams<T>, sal: &SalParams<T>) -> Result<Tensor<T>, AssemblyError> {
    if f_c.shape()[0] != params.gamma.shape()[0] {
        return Err(TensorError::ShapeMismatch { op: "sal", lhs: f_c.shape().to_vec(), rhs: params.gamma.shape().to_vec() }.into());
    }
    let z = ad::relu(&adain(&ad::conv2d(f_c, &sal.k1, 1, 1)?, params)?);
    let y = adain(&ad::conv2d(&z, &sal.k2, 1, 1)?, params)?;
    Ok(ad::add(&y, f_c)?)
}

/// A permutation of batch indices: row `i` is paired with style `indices[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShufflePermutation {
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl ShufflePermutation {
    pub fn identity(n: usize) -> Self {
        Self { indices: (0..n).collect(), seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.indices.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// `indices` must be a permutation of `0..len`.
    pub fn is_valid(&self) -> bool {
        let mut seen = vec![false; self.indices.len()];
        self.indices.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
    }
}

/// Uniform random permutation of `0..n` (Fisher-Yates), deterministic in `seed`.
pub fn sample_permutation(n: usize, seed: u64) -> Result<ShufflePermutation, AssemblyError> {
    if n == 0 {
        return Err(AssemblyError::EmptyPermutation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    Ok(ShufflePermutation { indices, seed })
}

/// Reorders the style batch by `perm` and runs the SAL stack over `f_c`.
/// Every layer derives its own gamma/beta from the same permuted styles.
pub fn assemble<T: Scalar>(
    f_c: &Tensor<T>,
    f_s: &Tensor<T>,
    perm: &ShufflePermutation,
    stack: &[SalParams<T>],
) -> Result<Tensor<T>, AssemblyError> {
    let batch = f_c.shape()[0];
    if perm.len() != batch || f_s.shape()[0] != batch {
        return Err(AssemblyError::PermutationLength { perm: perm.len(), batch });
    }
    let styles = if perm.is_identity() { f_s.clone() } else { ad::index_select_rows(f_s, &perm.indices)? };
    let mut h = f_c.clone();
    for sal in stack {
        h = sal_forward(&h, &styles, sal)?;
    }
    Ok(h)
}
