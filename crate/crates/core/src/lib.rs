//! Virtual adversarial training in input space and in the latent space of
//! a VAE or a coupling flow, on top of a small reverse-mode autodiff core.

pub mod classifier;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod io;
pub mod nets;
pub mod optim;
pub mod regularizer;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod transformer;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
