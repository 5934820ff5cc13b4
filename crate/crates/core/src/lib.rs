//! Stereo point-and-line visual SLAM: feature association and mismatch
//! filtering, dynamic-feature rejection, pose tracking, histogram-based
//! keyframe selection and loop detection, bundle adjustment and pose-graph
//! correction. A synthetic scene generator provides ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod association;
pub mod dynamics;
pub mod eval;
pub mod estimation;
pub mod camera;
pub mod config;
pub mod features;
pub mod geometry;
pub mod ggs;
pub mod grid;
pub mod io;
pub mod loopclosure;
pub mod mapping;
pub mod pipeline;
pub mod synth;

pub use camera::StereoCamera;
pub use features::{Frame, Landmark3D, LineFeature2D, LineSegment3, PointFeature2D};
pub use geometry::Pose;
pub use ggs::{compute_ggs, ggs_dissimilarity, GgsDescriptor};
