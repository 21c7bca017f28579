//! Co-regularized domain alignment for unsupervised domain adaptation.
//!
//! Two hypotheses `f_i = h_i ∘ g_i` are trained so that each one aligns its
//! source and target feature distributions adversarially, while their
//! predictions on unlabeled target data are pushed to agree and their
//! source feature embeddings are kept apart up to a cap.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration,
//! and the command-line driver live in the `coda` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod data;
mod error;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod state;
mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
