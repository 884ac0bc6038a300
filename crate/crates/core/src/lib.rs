//! Image denoising on top of a frozen convolutional encoder.

pub mod analyze;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod noise;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scenes;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, RangeTag};
pub use tensor::{Element, Tensor};
