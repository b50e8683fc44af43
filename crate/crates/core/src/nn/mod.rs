//! Minimal neural-network building blocks on top of candle tensors.

pub mod adam;
pub mod layers;
pub mod loss;
pub mod ops;
pub mod params;

pub use adam::{Adam, StepDecay};
pub use params::{Init, ParamBuilder, ParamStore};
