//! Core library for multi-modal delamination detection: tensors, reverse-mode
//! autodiff, the two modality encoders with attention, cross-modal fusion,
//! losses, training, evaluation, uncertainty decomposition, and the synthetic
//! survey generator.

pub mod checks;
pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod fusion;
pub mod gpr;
pub mod gradcheck;
pub mod init;
pub mod irt;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tape;
pub mod train;
pub mod uncertainty;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
