//! Discond-VAE: variational autoencoders whose continuous latents are split
//! into a class-independent *public* code and a class-dependent *private*
//! code modelled as a Gaussian mixture, one mode per discrete class.
//!
//! The crate is self-contained: [`tensor`] provides a dense f32 tensor type
//! with reverse-mode differentiation and the convolution kernels the
//! encoder/decoder stacks need, and the remaining modules build the models,
//! objectives, datasets and evaluation metrics on top of it.

pub mod data;
pub mod distributions;
pub mod error;
pub mod metrics;
pub mod models;
pub mod objective;
pub mod prior;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, ParameterSet, RandomSource, Tensor, Var};
