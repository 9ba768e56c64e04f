//! Desk-scale machinery for studying soft labels in dataset distillation.
//!
//! The crate is deliberately small and self-contained: a dense f64 tensor
//! type with a reverse-mode tape that can differentiate through SGD update
//! steps (for label meta-gradients), compact ConvNet/MLP trainers, soft
//! label generation and transformations, truncated-BPTT label learning,
//! and a power-law curve fitter for the data-knowledge trade-off.
//!
//! Everything here is pure computation over `alloc` containers; file
//! formats, CSV emission, plotting and the CLI live in the companion
//! `softlab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod bptt;
pub mod data;
pub mod error;
pub mod fit;
pub mod kernels;
pub mod labels;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tape::{Tape, TensorRef};
pub use tensor::Tensor;
