//! Variational auto-encoders with volume-preserving flow posteriors.
//!
//! The centerpiece is the convex-combination linear IAF: the encoder emits
//! `K` unit-lower-triangular matrices and softmax weights, and the posterior
//! sample is multiplied by their convex combination, which is again
//! unit-lower-triangular and therefore volume preserving.

pub mod data;
pub mod error;
pub mod flows;
pub mod nn;
pub mod rng;
pub mod tensor_ad;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
