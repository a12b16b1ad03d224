//! Desk-scale laboratory for retrieval-augmented vision-language alignment.
//!
//! Everything runs deterministically on CPU in f64: a tape-based autograd
//! engine, toy transformer stacks (vision encoder, decoder LM, connectors,
//! a latent compressor), an exact-retrieval memory bank with a binary on-disk
//! format, a two-stage training pipeline, exact information-theory tools over
//! small discrete alphabets, and a synthetic grid-world caption task that ties
//! them together.

pub mod container;
pub mod datagen;
pub mod emi;
pub mod error;
pub mod hash;
pub mod membank;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod rngs;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
