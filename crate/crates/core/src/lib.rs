//! Core numerics and attack/defense machinery for backdoor data-poisoning
//! experiments on small image classifiers.
//!
//! Everything in this crate is pure computation over owned buffers: a dense
//! f32 tensor with reverse-mode autodiff, the Adam optimizer, dataset
//! partitioning, trigger-pattern synthesis, poisoning plans, latent-space
//! regularizers, and the two-phase train/retrain protocol. File formats,
//! experiment configuration, and the CLI live in the companion `poisonlab`
//! crate.
//!
//! The crate is `no_std` + `alloc`; all float math is routed through `libm`
//! so results are bit-identical across std and no_std builds.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub(crate) mod fmath;
pub mod grad_check;
pub mod model;
pub mod optim;
pub mod pca;
pub mod poison;
pub mod regularize;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod trigger;

pub use error::{Error, Result};
pub use tape::{Padding, Tape, Var};
pub use tensor::Tensor;
