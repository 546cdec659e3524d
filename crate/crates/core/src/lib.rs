//! Ternary vision transformers for binary-embedding place recognition:
//! quantizers, packed 2-bit kernels, the model, distillation training, and
//! a Hamming-distance retrieval index.

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod formats;
pub mod image;
pub mod index;
pub mod kernels;
pub mod model;
pub mod pipeline;
pub mod quantize;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
