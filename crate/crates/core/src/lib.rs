//! Multi-task whole-slide-image classification with an expert consultation
//! projection, a Nyström-attention encoder and an autoregressive term decoder.

pub mod attention;
pub mod cli;
pub mod data;
mod binio;
pub mod ecn;
pub mod eval;
pub mod error;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, FormatError, Result};
pub use tensor::{Tape, Tensor, Var};
