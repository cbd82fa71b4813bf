//! Multimodal VAE laboratory: a small reverse-mode autodiff engine,
//! Laplace/Gaussian distributions, mixture- and product-of-experts models,
//! multi-sample bounds with DReG gradients, a deterministic trainer and the
//! evaluation protocols used to compare them.

pub mod analytic;
pub mod checkpoint;
pub mod data;
pub mod dataset_io;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tape, Tensor, Var};
