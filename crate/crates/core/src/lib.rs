//! Masked-autoencoder training with supervised attention-driven masking.
//!
//! The class token of a small vision transformer is trained with an auxiliary
//! classification loss; its last-block attention ranks image patches, and the
//! highest-ranked patches are masked for reconstruction, the middle band is
//! thrown away entirely, and the rest stays visible. The same partition is
//! reused while fine-tuning, and evaluation always sees every token.

pub mod error;
pub mod data;
pub mod imageops;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
