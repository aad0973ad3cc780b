pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod numerics;
pub mod skeleton;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
