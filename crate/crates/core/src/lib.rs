//! Compressed vertical federated learning, without the standard library.
//!
//! `M` parties each hold a disjoint block of feature columns for the same
//! samples. Every party maps its block to an embedding with a small MLP, the
//! server fuses all embeddings with its own model, and participants exchange
//! compressed embeddings once every `Q` local iterations.
//!
//! The crate is `no_std` + `alloc`. Everything that touches the file system,
//! threads or the clock lives in the `cvfl` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod compress;
pub mod data;
mod error;
pub mod fd;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{Activation, GradientSet, MlpModel};
