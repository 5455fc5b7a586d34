//! A classifier whose intermediate features are words.
//!
//! An image encoder and a cross-attending text decoder turn `n` trainable
//! soft prompts into `n` next-token distributions. Their expectations under
//! the word-embedding matrix are mean pooled and classified by a linear head,
//! so the head only ever sees (soft or hard) word vectors.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub mod data;
pub mod model;
pub mod objectives;
pub mod train;
pub mod rng;
