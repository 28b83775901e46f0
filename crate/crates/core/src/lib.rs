//! Event-to-depth toolkit: event simulation from frame sequences,
//! spatio-temporal voxel encoding, a recurrent convolutional depth network
//! with its own float64 differentiation engine, scale-invariant training
//! losses, and a standard depth-metrics evaluator.

pub mod data;
pub mod error;
pub mod events;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod gradcheck;
pub mod losses;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
