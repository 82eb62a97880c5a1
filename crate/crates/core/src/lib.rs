//! Data-efficient operator learning at desk scale: PDE dataset generation,
//! Fourier neural operators, reconstruction pretraining, supervised
//! fine-tuning and similarity-based in-context inference.

pub mod datamodel;
mod error;
pub mod finetune;
pub mod fno;
pub mod icl;
pub mod pdegen;
pub mod pretrain;
pub mod runtime;

pub use error::{Error, Result};
