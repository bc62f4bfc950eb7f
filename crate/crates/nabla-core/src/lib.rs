//! Core library for the nabla segmentation/classification models.
//!
//! Everything is CPU-only `f32`/`f64` with a tape-based reverse-mode
//! autodiff engine. The layer vocabulary is deliberately small: 2D
//! convolution (plus its transpose), max pooling, batch normalization,
//! relu/sigmoid/softmax, channel concatenation, elementwise add and
//! global average pooling. Recurrent-residual blocks, the multi-decoder
//! segmentation network and the inception-recurrent classifier are
//! composed from those primitives, so a single gradient checker covers
//! the whole model zoo.

pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, ValueId};
pub use tensor::{Shape, Tensor};
