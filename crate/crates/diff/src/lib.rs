//! A small dense-tensor engine: real and complex tensors, a reverse-mode tape
//! over the operations a Fourier neural operator needs, and Adam.
//!
//! Reductions run in a fixed order and nothing here spawns threads, so equal
//! inputs give bit-identical values and gradients.

mod error;
pub mod fft;
pub mod gradcheck;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use error::DiffError;
pub use param::{Adam, ParamId, ParamStore, Parameter};
pub use rustfft::num_complex::Complex;
pub use scalar::{matmul, FftPlans, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
