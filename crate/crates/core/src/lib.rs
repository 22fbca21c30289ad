//! Parameter-efficient adapters on a frozen ViT backbone with multi-exit
//! supervision, structural weight fusion and budgeted early-exit inference.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod rng;
pub mod runconfig;
pub mod training;
mod wire;

pub use error::{Error, Result};
pub use wire::write_atomic;
