//! Steering-angle regression from camera frame sequences, with pixel-wise
//! ray-orientation maps as extra input or fused after a convolution.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line tools.

pub mod camera_geometry;
pub mod config;
pub mod data_pipeline;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod network;
pub mod scalar;
pub mod synthetic_track;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Camera geometry is always evaluated in double precision.
pub type Intrinsics = camera_geometry::CameraIntrinsics<f64>;
pub type Maps = camera_geometry::OrientationMaps<f64>;
/// Models train and run in single precision.
pub type Model = network::SteeringModel<f32>;
pub type Loss = losses::LossConfig<f64>;
pub type Checkpoint = training::Checkpoint<f32>;
pub type TrainOutcome = training::TrainOutcome<f32>;
