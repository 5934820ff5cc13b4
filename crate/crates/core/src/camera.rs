//! Rectified stereo pinhole camera and stereo triangulation.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::features::{LineFeature2D, LineSegment3, PointFeature2D};

/// Features with a disparity at or below this value are kept as 2-D only.
pub const MIN_DISPARITY: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("focal lengths and baseline must be positive (fx={fx}, fy={fy}, baseline={baseline})")]
    NonPositive { fx: f64, fy: f64, baseline: f64 },
    #[error("principal point ({cx}, {cy}) outside the {width}x{height} image")]
    PrincipalPoint {
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    },
}

/// Why a stereo feature could not be lifted to 3-D.
#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum TriangulationError {
    #[error("feature has no stereo match")]
    Unmatched,
    #[error("disparity {0} at or below the minimum")]
    LowDisparity(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub width: u32,
    pub height: u32,
}

impl StereoCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        baseline: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0 && baseline > 0.0) {
            return Err(CameraError::NonPositive { fx, fy, baseline });
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(CameraError::PrincipalPoint {
                cx,
                cy,
                width,
                height,
            });
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            baseline,
            width,
            height,
        })
    }

    /// Disparity scale `fx * baseline`; depth is this divided by disparity.
    pub fn bf(&self) -> f64 {
        self.fx * self.baseline
    }

    /// Pinhole projection of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        (p.z > 0.0).then(|| {
            Vector2::new(
                self.fx * p.x / p.z + self.cx,
                self.fy * p.y / p.z + self.cy,
            )
        })
    }

    /// Pixel to normalized image plane (z = 1).
    pub fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, n: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(n.x * self.fx + self.cx, n.y * self.fy + self.cy)
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Smallest distance from `px` to any image border.
    pub fn border_distance(&self, px: &Vector2<f64>) -> f64 {
        px.x.min(px.y)
            .min(self.width as f64 - px.x)
            .min(self.height as f64 - px.y)
    }

    pub fn back_project(&self, u: f64, v: f64, disparity: f64) -> Result<Vector3<f64>, TriangulationError> {
        if !(disparity > MIN_DISPARITY) {
            return Err(TriangulationError::LowDisparity(disparity));
        }
        let z = self.bf() / disparity;
        Ok(Vector3::new(
            (u - self.cx) * z / self.fx,
            (v - self.cy) * z / self.fy,
            z,
        ))
    }

    pub fn triangulate_point(&self, f: &PointFeature2D) -> Result<Vector3<f64>, TriangulationError> {
        let d = f.disparity.ok_or(TriangulationError::Unmatched)?;
        self.back_project(f.u, f.v, d)
    }

    /// Endpoint-wise triangulation from a left line and its right-image counterpart.
    pub fn triangulate_line(
        &self,
        left: &LineFeature2D,
        right: &LineFeature2D,
    ) -> Result<LineSegment3, TriangulationError> {
        let start = self.back_project(left.start.x, left.start.y, left.start.x - right.start.x)?;
        let end = self.back_project(left.end.x, left.end.y, left.end.x - right.end.x)?;
        Ok(LineSegment3::new(start, end))
    }

    /// Triangulates a line using the per-endpoint disparities it carries.
    pub fn triangulate_stereo_line(&self, line: &LineFeature2D) -> Result<LineSegment3, TriangulationError> {
        let [ds, de] = line.disparity.ok_or(TriangulationError::Unmatched)?;
        let start = self.back_project(line.start.x, line.start.y, ds)?;
        let end = self.back_project(line.end.x, line.end.y, de)?;
        Ok(LineSegment3::new(start, end))
    }
}
