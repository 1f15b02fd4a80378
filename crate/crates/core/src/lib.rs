//! Effective-receptive-field attribution for sparse-autoencoder features of
//! small vision transformers.

// Range checks are written `!(x > lo)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod erf;
pub mod eval;
pub mod attribution;
pub mod exec;
pub mod io;
pub mod ops;
pub mod sae;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
