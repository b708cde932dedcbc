//! Reverse-mode autodiff, CTC, transformer and convolutional blocks, and the
//! teacher/student distillation pipeline built on them.

pub mod autodiff;
mod codec;
pub mod ctc;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod seed;
pub mod train;

pub use error::{Error, FormatError, Result};
