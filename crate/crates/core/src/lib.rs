//! Self-labeling conditional variational auto-encoders for generating many
//! diverse target sequences from one source sequence.

pub mod error;
pub mod eval;
pub mod cli;
pub mod corpus;
pub mod diagnostics;
pub mod latent;
pub mod model;
pub mod numeric;
pub mod seqnn;
pub mod train;

pub use error::{Error, Result};
