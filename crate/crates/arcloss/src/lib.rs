//! Training and analysis toolkit for angular-margin contrastive learning.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod util;

pub mod data;
pub mod geometry;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod schedule;

pub use error::{Error, Result};
pub use tensor::Tensor;
