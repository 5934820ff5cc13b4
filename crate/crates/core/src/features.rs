//! Measurement primitives: 2-D point and line features, 3-D landmarks, frames.

use image::GrayImage;
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::ggs::GgsDescriptor;

/// Track identity of a feature. Temporal association is by id.
pub type FeatureId = u64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointFeature2D {
    pub id: FeatureId,
    pub u: f64,
    pub v: f64,
    /// `uL - uR` when stereo-matched.
    pub disparity: Option<f64>,
}

impl PointFeature2D {
    pub fn mono(id: FeatureId, u: f64, v: f64) -> Self {
        Self {
            id,
            u,
            v,
            disparity: None,
        }
    }

    pub fn stereo(id: FeatureId, u: f64, v: f64, disparity: f64) -> Self {
        Self {
            id,
            u,
            v,
            disparity: Some(disparity),
        }
    }

    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("line {id} has zero length")]
pub struct DegenerateLine {
    pub id: FeatureId,
}

/// A detected line segment. Midpoint and length are derived from the endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFeature2D {
    pub id: FeatureId,
    pub start: Vector2<f64>,
    pub end: Vector2<f64>,
    /// Per-endpoint disparity `[start, end]` when stereo-matched.
    pub disparity: Option<[f64; 2]>,
}

impl LineFeature2D {
    pub fn new(id: FeatureId, start: Vector2<f64>, end: Vector2<f64>) -> Result<Self, DegenerateLine> {
        if (end - start).norm() > 0.0 {
            Ok(Self {
                id,
                start,
                end,
                disparity: None,
            })
        } else {
            Err(DegenerateLine { id })
        }
    }

    pub fn with_disparity(mut self, start: f64, end: f64) -> Self {
        self.disparity = Some([start, end]);
        self
    }

    pub fn midpoint(&self) -> Vector2<f64> {
        (self.start + self.end) / 2.0
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    /// Undirected orientation in `[0, pi)`.
    pub fn orientation(&self) -> f64 {
        let d = self.end - self.start;
        d.y.atan2(d.x).rem_euclid(std::f64::consts::PI)
    }
}

/// A 3-D segment given by its endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment3 {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
}

impl LineSegment3 {
    pub fn new(start: Vector3<f64>, end: Vector3<f64>) -> Self {
        Self { start, end }
    }

    /// `(l, m, n) = end - start`.
    pub fn direction(&self) -> Vector3<f64> {
        self.end - self.start
    }

    pub fn transform(&self, pose: &Pose) -> Self {
        Self {
            start: pose.transform_point(&self.start),
            end: pose.transform_point(&self.end),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Landmark3D {
    Point(Vector3<f64>),
    Line(LineSegment3),
}

impl Landmark3D {
    pub fn transform(&self, pose: &Pose) -> Self {
        match self {
            Landmark3D::Point(p) => Landmark3D::Point(pose.transform_point(p)),
            Landmark3D::Line(l) => Landmark3D::Line(l.transform(pose)),
        }
    }

    pub fn is_point(&self) -> bool {
        matches!(self, Landmark3D::Point(_))
    }
}

/// One stereo frame moving through the pipeline.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub left: Option<GrayImage>,
    pub right: Option<GrayImage>,
    pub points: Vec<PointFeature2D>,
    pub lines: Vec<LineFeature2D>,
    pub ggs: Option<GgsDescriptor>,
    /// World-from-camera; meaningful once tracking succeeded.
    pub pose: Pose,
    pub is_keyframe: bool,
}

impl Frame {
    pub fn new(index: usize, timestamp: f64) -> Self {
        Self {
            index,
            timestamp,
            left: None,
            right: None,
            points: Vec::new(),
            lines: Vec::new(),
            ggs: None,
            pose: Pose::identity(),
            is_keyframe: false,
        }
    }
}
