//! Rotation-invariant face detection with a three-stage cascade of small
//! CNNs that progressively calibrate each candidate window to upright.

pub mod cascade;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{PcnError, Result};
pub use tensor::{Real, Tensor};
