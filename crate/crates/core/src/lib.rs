//! Sparse-to-dense multi-view stereo on the CPU.
//!
//! The pipeline estimates a depth map for a reference view from a set of
//! calibrated neighbor views in three stages: a sparse high-resolution
//! plane-sweep cost volume regressed to depth by soft argmax, image-guided
//! propagation of the sparse depth into a dense map, and per-pixel
//! Gauss-Newton refinement against multi-view feature residuals. Depth maps
//! from all views are fused into a colored point cloud.
//!
//! Everything runs in double precision on a minimal reverse-mode autodiff
//! tape, so the whole pipeline is trainable end-to-end at desk scale.

pub mod camera;
pub mod cost_volume;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod gauss_newton;
pub mod nets;
pub mod pipeline;
pub mod propagation;
pub mod tensor;

pub use camera::{CameraView, Intrinsics, Pose};
pub use error::{Error, Result};
pub use tensor::Tensor;
