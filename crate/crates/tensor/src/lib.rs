//! Dense `f64` tensor algebra with tape-based reverse-mode differentiation,
//! the Adam optimiser, a seedable counter-based RNG and a flat binary
//! checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Container;
pub use error::{Result, TensorError};
pub use params::{ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use tape::{Axis, Gradients, NodeId, ParamGrads, Tape};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    tape::logistic(x)
}
