//! Minimal neural-network toolkit on top of candle tensors.

pub mod kernels;
pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{Conv1d, ResidualUnit, Snake, Upsample1d};
pub use params::ParamStore;
