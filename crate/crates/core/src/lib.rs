//! Event + RGB fusion object detection at desk scale.

pub mod align;
pub mod detector;
pub mod autograd;
pub mod error;
pub mod evalkit;
pub mod events;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod scenesim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
