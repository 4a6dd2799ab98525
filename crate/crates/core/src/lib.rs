//! Speaker-embedding de-identification with an autoencoder-adversarial
//! network, plus the synthetic corpus and ASV-style evaluation around it.

pub mod aan;
pub mod anonymizer;
pub mod asv;
pub mod dataset;
pub mod error;
pub mod neural;
pub mod pipeline;

pub use error::{Error, Result};
