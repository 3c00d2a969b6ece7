//! Neural speech codec with a semantically distilled first quantizer stage
//! and FiLM-conditioned decoding.

pub mod ablation;
pub mod audio_io;
pub mod bitstream;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod quantization;
pub mod spectral;
pub mod teacher;
pub mod training;

pub use error::{Error, Result};
