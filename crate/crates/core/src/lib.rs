//! Dual-branch pseudo-label distillation for weakly-supervised temporal
//! action localization.
//!
//! The crate is `no_std` (with `alloc`). It holds everything that is pure
//! computation: a small reverse-mode autodiff engine, the two localization
//! branches, the pseudo-label distillation losses and training schedule,
//! proposal generation and the evaluation metrics, plus an in-memory
//! synthetic dataset generator. File formats and the command line live in
//! the `wtal` companion crate.
#![cfg_attr(all(not(feature = "std"), not(test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod cbp;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fuse;
pub mod gradcheck;
pub mod math;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod vlp;

pub use error::{Error, Result};
pub use tensor::Tensor;
