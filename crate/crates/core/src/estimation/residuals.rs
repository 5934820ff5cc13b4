//! Point and line reprojection residuals with analytic Jacobians.
//!
//! All residuals live on the normalized image plane and are multiplied by
//! `fx`, so they read in pixels. Pose Jacobians are taken with respect to a
//! left-multiplied increment `T <- exp(delta) * T` of the camera-from-world
//! pose, tangent order `[rho, omega]`.

use nalgebra::{Matrix2, Matrix2x3, Matrix2x6, Matrix3x6, RowVector2, RowVector6, SMatrix, Vector2, Vector3};

use crate::camera::StereoCamera;
use crate::geometry::{hat, Pose};

/// Points closer than this to the camera plane are treated as behind it.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResidualKind {
    Point,
    LineVertical,
    LineHorizontal,
}

impl ResidualKind {
    pub fn dim(self) -> usize {
        match self {
            ResidualKind::Point | ResidualKind::LineVertical => 2,
            ResidualKind::LineHorizontal => 1,
        }
    }
}

/// A projected 3-D line on the normalized plane: start `(x1, y1)` and
/// direction `(l, m) = (x2 - x1, y2 - y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedLine {
    pub x1: f64,
    pub y1: f64,
    pub l: f64,
    pub m: f64,
}

impl NormalizedLine {
    pub fn from_endpoints(p1: &Vector2<f64>, p2: &Vector2<f64>) -> Option<Self> {
        let d = p2 - p1;
        (d.norm_squared() > 0.0).then_some(Self {
            x1: p1.x,
            y1: p1.y,
            l: d.x,
            m: d.y,
        })
    }

    pub fn start(&self) -> Vector2<f64> {
        Vector2::new(self.x1, self.y1)
    }

    pub fn end(&self) -> Vector2<f64> {
        Vector2::new(self.x1 + self.l, self.y1 + self.m)
    }

    pub fn direction(&self) -> Vector2<f64> {
        Vector2::new(self.l, self.m)
    }
}

/// Projection of one camera-frame point onto the normalized plane together
/// with the derivatives needed by every residual.
#[derive(Debug, Clone, Copy)]
struct Projected {
    n: Vector2<f64>,
    /// d n / d pose increment.
    d_pose: Matrix2x6<f64>,
    /// d n / d world point.
    d_point: Matrix2x3<f64>,
}

fn project(pose: &Pose, pw: &Vector3<f64>) -> Option<Projected> {
    let pc = pose.transform_point(pw);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / pc.z;
    let dn_dpc = Matrix2x3::new(iz, 0.0, -pc.x * iz * iz, 0.0, iz, -pc.y * iz * iz);
    let mut dpc_dxi = Matrix3x6::zeros();
    dpc_dxi.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    dpc_dxi.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&pc)));
    Some(Projected {
        n: Vector2::new(pc.x * iz, pc.y * iz),
        d_pose: dn_dpc * dpc_dxi,
        d_point: dn_dpc * pose.rotation(),
    })
}

/// Signed distances of the detected endpoints `s`, `e` to the projected line,
/// `d = ([x - x1, y - y1] x [l, m]) / sqrt(l^2 + m^2)` with `a x b = a.x*b.y - a.y*b.x`.
/// A point below a left-to-right line (larger `y`) gives a negative value.
pub fn vertical_distances(line: &NormalizedLine, s: &Vector2<f64>, e: &Vector2<f64>) -> (f64, f64) {
    let (p1, u) = (line.start(), line.direction());
    let norm = u.norm();
    ((s - p1).perp(&u) / norm, (e - p1).perp(&u) / norm)
}

/// Along-line displacement of the detected endpoints from the projected ones,
/// averaged: `((s - P1) . u + (e - P2) . u) / (2 |u|)`.
pub fn horizontal_displacement(line: &NormalizedLine, s: &Vector2<f64>, e: &Vector2<f64>) -> f64 {
    let u = line.direction();
    let norm = u.norm();
    0.5 * ((s - line.start()).dot(&u) + (e - line.end()).dot(&u)) / norm
}

/// Gradients of one vertical distance w.r.t. `P1` and `P2`.
fn vertical_grad(p1: &Vector2<f64>, p2: &Vector2<f64>, x: &Vector2<f64>) -> (RowVector2<f64>, RowVector2<f64>) {
    let u = p2 - p1;
    let a = x - p1;
    let norm = u.norm();
    let c = a.perp(&u);
    let dc_da = RowVector2::new(u.y, -u.x);
    let dc_du = RowVector2::new(-a.y, a.x);
    let dd_du = dc_du / norm - u.transpose() * (c / (norm * norm * norm));
    (-dc_da / norm - dd_du, dd_du)
}

/// Gradients of `f(a, u) = a . u / |u|`.
fn along_grad(a: &Vector2<f64>, u: &Vector2<f64>) -> (RowVector2<f64>, RowVector2<f64>) {
    let norm = u.norm();
    let df_da = u.transpose() / norm;
    let df_du = a.transpose() / norm - u.transpose() * (a.dot(u) / (norm * norm * norm));
    (df_da, df_du)
}

/// Residual value(s) of one block with Jacobians for pose and landmark.
/// Rows past `kind.dim()` are zero. Landmark columns `0..3` belong to the
/// point (or line start), `3..6` to the line end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluated {
    pub kind: ResidualKind,
    pub residual: Vector2<f64>,
    pub jac_pose: Matrix2x6<f64>,
    pub jac_landmark: Matrix2x6<f64>,
}

impl Evaluated {
    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn norm(&self) -> f64 {
        self.residual.norm()
    }
}

/// `fx * (observed - projected)` on the normalized plane.
pub fn point_residual(pw: &Vector3<f64>, observation: &Vector2<f64>, pose: &Pose, cam: &StereoCamera) -> Option<Evaluated> {
    let pr = project(pose, pw)?;
    let obs = cam.normalize(observation);
    let mut jac_landmark = Matrix2x6::zeros();
    jac_landmark.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-cam.fx * pr.d_point));
    Some(Evaluated {
        kind: ResidualKind::Point,
        residual: (obs - pr.n) * cam.fx,
        jac_pose: -cam.fx * pr.d_pose,
        jac_landmark,
    })
}

fn project_line(start: &Vector3<f64>, end: &Vector3<f64>, pose: &Pose) -> Option<(Projected, Projected)> {
    let a = project(pose, start)?;
    let b = project(pose, end)?;
    ((b.n - a.n).norm_squared() > 0.0).then_some((a, b))
}

/// Chains endpoint gradients `g1 = dr/dP1`, `g2 = dr/dP2` into pose and
/// landmark Jacobian rows.
fn chain(g1: &RowVector2<f64>, g2: &RowVector2<f64>, a: &Projected, b: &Projected, scale: f64) -> (RowVector6<f64>, RowVector6<f64>) {
    let jp = (g1 * a.d_pose + g2 * b.d_pose) * scale;
    let mut jl = RowVector6::zeros();
    jl.fixed_columns_mut::<3>(0).copy_from(&(g1 * a.d_point * scale));
    jl.fixed_columns_mut::<3>(3).copy_from(&(g2 * b.d_point * scale));
    (jp, jl)
}

/// Signed perpendicular distances `(d_s, d_e)` of the detected endpoints to
/// the projected world line, times `fx`. `None` when the line projects
/// behind the camera or onto a single point.
pub fn line_vertical_residual(
    start: &Vector3<f64>,
    end: &Vector3<f64>,
    detected: (&Vector2<f64>, &Vector2<f64>),
    pose: &Pose,
    cam: &StereoCamera,
) -> Option<Evaluated> {
    let (a, b) = project_line(start, end, pose)?;
    let (s, e) = (cam.normalize(detected.0), cam.normalize(detected.1));
    let line = NormalizedLine::from_endpoints(&a.n, &b.n)?;
    let (ds, de) = vertical_distances(&line, &s, &e);
    let mut out = Evaluated {
        kind: ResidualKind::LineVertical,
        residual: Vector2::new(ds, de) * cam.fx,
        jac_pose: Matrix2x6::zeros(),
        jac_landmark: Matrix2x6::zeros(),
    };
    for (row, x) in [s, e].iter().enumerate() {
        let (g1, g2) = vertical_grad(&a.n, &b.n, x);
        let (jp, jl) = chain(&g1, &g2, &a, &b, cam.fx);
        out.jac_pose.set_row(row, &jp);
        out.jac_landmark.set_row(row, &jl);
    }
    Some(out)
}

/// Along-line surrogate for the horizontal error, times `fx`. Only defined
/// when both detected endpoints are at least `edge_margin` pixels from every
/// image border; near-edge endpoints are likely truncated.
pub fn line_horizontal_residual(
    start: &Vector3<f64>,
    end: &Vector3<f64>,
    detected: (&Vector2<f64>, &Vector2<f64>),
    pose: &Pose,
    cam: &StereoCamera,
    edge_margin: f64,
) -> Option<Evaluated> {
    if cam.border_distance(detected.0) < edge_margin || cam.border_distance(detected.1) < edge_margin {
        return None;
    }
    let (a, b) = project_line(start, end, pose)?;
    let (s, e) = (cam.normalize(detected.0), cam.normalize(detected.1));
    let line = NormalizedLine::from_endpoints(&a.n, &b.n)?;
    let h = horizontal_displacement(&line, &s, &e);
    let u = b.n - a.n;
    let (df1_da, df1_du) = along_grad(&(s - a.n), &u);
    let (df2_da, df2_du) = along_grad(&(e - b.n), &u);
    let g1 = (-df1_da - df1_du - df2_du) * 0.5;
    let g2 = (df1_du - df2_da + df2_du) * 0.5;
    let (jp, jl) = chain(&g1, &g2, &a, &b, cam.fx);
    let mut out = Evaluated {
        kind: ResidualKind::LineHorizontal,
        residual: Vector2::new(h * cam.fx, 0.0),
        jac_pose: Matrix2x6::zeros(),
        jac_landmark: Matrix2x6::zeros(),
    };
    out.jac_pose.set_row(0, &jp);
    out.jac_landmark.set_row(0, &jl);
    Some(out)
}

/// Huber cost `rho(r^2)` and IRLS weight for residual norm `r`.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r <= delta {
        (r * r, 1.0)
    } else {
        (2.0 * delta * r - delta * delta, delta / r)
    }
}

/// Weighted Gauss-Newton contribution `(J^T W J, J^T W r)` of a block with
/// `dim` rows.
pub fn normal_terms<const N: usize>(
    jac: &SMatrix<f64, 2, N>,
    residual: &Vector2<f64>,
    dim: usize,
    weight: f64,
) -> (SMatrix<f64, N, N>, SMatrix<f64, N, 1>) {
    let mut mask = Matrix2::identity();
    if dim == 1 {
        mask[(1, 1)] = 0.0;
    }
    let jt = jac.transpose() * mask;
    (jt * jac * weight, jt * residual * weight)
}
