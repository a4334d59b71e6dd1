//! Shuffled style assembly networks for domain-generalized face anti-spoofing.
//!
//! The tensor engine and every model component are generic over [`Scalar`]
//! (`f32` or `f64`); the aliases below fix the element type to `f64`.

pub mod assembly;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod normalization;
pub mod scalar;
pub mod training;

pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Params = model::SsanParams<f64>;
pub type Outputs = model::SsanOutputs<f64>;
pub type Batch = data::Batch<f64>;
pub type TrainState = training::TrainState<f64>;
