//! Deformable convolution as warping plus pointwise mixing.

pub mod alignment;
pub mod analysis;
pub mod dcn;
pub mod error;
pub mod gradients;
pub mod harness;
pub mod io;
pub mod losses;
pub mod rng;
pub mod sampling;
pub mod suites;
pub mod tensor;

pub use dcn::{ConvKernel, MaskField, OffsetField, PointwiseKernel};
pub use error::{Error, Result};
pub use sampling::{BaseOffset, Displacement};
pub use tensor::{DType, FeatureMap, FlowField, Tensor};
