//! Federated object-centric representation learning on synthetic
//! multi-model feature grids: autodiff engine, adapters, slot attention,
//! broadcast decoders, two-branch client training, federation and metrics.

pub mod adapters;
pub mod branch;
pub mod decoder;
mod error;
pub mod features;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod slot;
pub mod tensor;

pub use error::{Error, Result};
