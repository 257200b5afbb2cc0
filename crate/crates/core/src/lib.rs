//! Missing-modality robust emotion recognition in conversation.
//!
//! The crate is split into:
//!
//! - [`numerics`]: dense tensors, reverse-mode autodiff, Adam, gradient checks
//! - [`dataio`]: conversations, modality masks, JSON-lines format, synthetic data
//! - [`panet`]: the party-attentive recurrent classifier
//! - [`crl`]: common-representation learning with adversarial imputation
//! - [`m2r2`]: the alternating training loop coupling the two models
//! - [`harness`]: metrics, sweeps and experiment configuration

pub mod crl;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod m2r2;
pub mod numerics;
pub mod panet;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
