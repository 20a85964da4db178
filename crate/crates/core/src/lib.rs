//! Lightened convolutional networks with Max-Feature-Map activations.

pub mod align;
pub mod bench;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model_io;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod zoo;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Shape, Tensor};
