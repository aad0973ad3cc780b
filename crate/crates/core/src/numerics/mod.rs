//! Dense tensors, reverse-mode differentiation, a seeded RNG and Adam.

mod adam;
mod autodiff;
pub mod linalg;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use autodiff::{no_grad, Var};
pub use rng::{derive_seed, Rng};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use autodiff::sigmoid;
