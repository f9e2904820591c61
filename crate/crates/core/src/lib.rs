//! Point transformer encoder-decoder for salient object detection on 3D
//! point clouds, built on a small `f64` reverse-mode autodiff tape.
//!
//! Layout:
//! - [`tensor`]: tensors, the compute graph, and gradient checking
//! - [`pointcloud`]: normalization, farthest point sampling, ball grouping, interpolation
//! - [`attention`], [`feature_norm`]: the transformer block and grouped-feature normalization
//! - [`encoder`], [`decoder`], [`model`]: the network
//! - [`train`]: loss, Adam, metrics, synthetic scenes, ablations
//! - [`io`]: PLY files, checkpoints, metrics reports

pub mod attention;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod feature_norm;
pub mod io;
pub mod model;
pub mod params;
pub mod pointcloud;
pub mod predict;
pub mod tensor;
pub mod train;

pub use config::{AblationFlags, Component, ModelConfig, Regime};
pub use error::{Error, Result};
pub use model::Model;
pub use pointcloud::PointCloud;
pub use tensor::{Graph, Tensor, Var};
