//! Learnable meta-pattern extraction for presentation-attack detection.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]), the convolutional building blocks ([`nn`]), the pattern
//! extractor and two-stream fusion network ([`models`]), a synthetic
//! multi-domain data generator ([`data`]), the bi-level training loop
//! ([`trainer`]), and leave-one-domain-out evaluation ([`eval`]).
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `metapattern` binary for the end-to-end command line.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
