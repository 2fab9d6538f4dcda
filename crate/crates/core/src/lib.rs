//! Point-set object detection with corner and foreground verification.
//!
//! Geometry and point-set-to-box conversion, training-target construction,
//! the verification losses, corner pooling / bilinear sampling / feature
//! fusion kernels, joint-inference decoding, and a small CPU training and
//! evaluation pipeline over synthetic images.

pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod kernels;
pub mod losses;
pub mod pipeline;
pub mod scene;
pub mod targets;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{convert, BoxXYXY, ConversionMode, Point2, PointSet};
pub use inference::{joint_refine, nms, run_inference, CandidateLevels, CornerCandidate, Detection, InferenceConfig, RefineConfig};
pub use scene::{GtObject, GtScene};
pub use targets::{assign_all_levels, LevelSpec, LevelTargets, TargetParams};
pub use tensor::Tensor;
