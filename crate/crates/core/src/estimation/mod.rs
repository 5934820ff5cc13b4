//! Frame-to-frame pose tracking: robust Levenberg-Marquardt over point
//! reprojection residuals and line vertical/horizontal residuals.

mod residuals;

pub use residuals::{
    horizontal_displacement, huber, line_horizontal_residual, line_vertical_residual, normal_terms, point_residual,
    vertical_distances, Evaluated, NormalizedLine, ResidualKind, MIN_DEPTH,
};

use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::camera::StereoCamera;
use crate::features::{FeatureId, LineFeature2D, LineSegment3};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmParams {
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iters: usize,
    pub step_tol: f64,
    pub cost_tol: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            max_iters: 30,
            step_tol: 1e-8,
            cost_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationParams {
    pub lm: LmParams,
    /// Huber threshold on the residual norm (px).
    pub huber_delta: f64,
    /// Minimum endpoint distance from the border for a horizontal block (px).
    pub edge_margin: f64,
    pub use_lines: bool,
    pub use_horizontal: bool,
    /// Residual norm below which a correspondence counts as an inlier (px).
    pub inlier_threshold: f64,
    pub information_point: f64,
    pub information_line: f64,
}

impl Default for EstimationParams {
    fn default() -> Self {
        Self {
            lm: LmParams::default(),
            huber_delta: 2.0,
            edge_margin: 20.0,
            use_lines: true,
            use_horizontal: true,
            inlier_threshold: 3.0,
            information_point: 1.0,
            information_line: 1.0,
        }
    }
}

/// A 3-D point in the reference frame and its pixel observation in the
/// frame being tracked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCorrespondence {
    pub id: FeatureId,
    pub landmark: Vector3<f64>,
    pub observation: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineCorrespondence {
    pub id: FeatureId,
    pub landmark: LineSegment3,
    pub observation: LineFeature2D,
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum EstimationError {
    #[error("tracking lost: {0} usable residual blocks, need at least 3")]
    UnderConstrained(usize),
    #[error("tracking lost: normal equations are rank deficient")]
    RankDeficient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// Tracked-frame-from-reference-frame.
    pub pose: Pose,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    /// False when `max_iters` ran out before a stopping test fired.
    pub converged: bool,
    /// Final robust weight per residual block, in evaluation order
    /// (points, then for each line its vertical and optional horizontal block).
    pub weights: Vec<f64>,
    pub point_inliers: Vec<bool>,
    pub line_inliers: Vec<bool>,
    pub blocks: usize,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.point_inliers.iter().filter(|&&b| b).count() + self.line_inliers.iter().filter(|&&b| b).count()
    }
}

struct Problem<'a> {
    points: &'a [PointCorrespondence],
    lines: &'a [LineCorrespondence],
    cam: &'a StereoCamera,
    params: &'a EstimationParams,
}

struct Linearization {
    cost: f64,
    h: Matrix6<f64>,
    g: Vector6<f64>,
    blocks: usize,
    weights: Vec<f64>,
}

impl Problem<'_> {
    fn blocks(&self, pose: &Pose) -> Vec<(Evaluated, f64)> {
        let mut out = Vec::with_capacity(self.points.len() + 2 * self.lines.len());
        for p in self.points {
            if let Some(e) = point_residual(&p.landmark, &p.observation, pose, self.cam) {
                out.push((e, self.params.information_point));
            }
        }
        if self.params.use_lines {
            for l in self.lines {
                let det = (&l.observation.start, &l.observation.end);
                let (s, e) = (&l.landmark.start, &l.landmark.end);
                if let Some(ev) = line_vertical_residual(s, e, det, pose, self.cam) {
                    out.push((ev, self.params.information_line));
                }
                if self.params.use_horizontal {
                    if let Some(ev) = line_horizontal_residual(s, e, det, pose, self.cam, self.params.edge_margin) {
                        out.push((ev, self.params.information_line));
                    }
                }
            }
        }
        out
    }

    fn cost(&self, pose: &Pose) -> f64 {
        self.blocks(pose)
            .iter()
            .map(|(e, info)| info * huber(e.norm(), self.params.huber_delta).0)
            .sum()
    }

    fn linearize(&self, pose: &Pose) -> Linearization {
        let blocks = self.blocks(pose);
        let mut lin = Linearization {
            cost: 0.0,
            h: Matrix6::zeros(),
            g: Vector6::zeros(),
            blocks: blocks.len(),
            weights: Vec::with_capacity(blocks.len()),
        };
        for (e, info) in &blocks {
            let (rho, w) = huber(e.norm(), self.params.huber_delta);
            lin.cost += info * rho;
            let (h, g) = normal_terms(&e.jac_pose, &e.residual, e.dim(), info * w);
            lin.h += h;
            lin.g += g;
            lin.weights.push(w);
        }
        lin
    }
}

/// Minimizes the robust point-and-line reprojection cost over the pose of
/// the tracked frame relative to the reference frame the landmarks live in,
/// starting from `initial` (normally the constant-velocity prediction).
pub fn estimate_pose(
    points: &[PointCorrespondence],
    lines: &[LineCorrespondence],
    initial: &Pose,
    cam: &StereoCamera,
    params: &EstimationParams,
) -> Result<PoseEstimate, EstimationError> {
    let problem = Problem {
        points,
        lines,
        cam,
        params,
    };
    let mut pose = *initial;
    let mut lin = problem.linearize(&pose);
    if lin.blocks < 3 {
        return Err(EstimationError::UnderConstrained(lin.blocks));
    }
    if is_rank_deficient(&lin.h) {
        return Err(EstimationError::RankDeficient);
    }
    let initial_cost = lin.cost;
    let lm = &params.lm;
    let mut lambda = lm.lambda_init;
    let mut converged = lin.cost == 0.0;
    let mut iterations = 0;

    while !converged && iterations < lm.max_iters {
        iterations += 1;
        let mut a = lin.h;
        for i in 0..6 {
            a[(i, i)] += lambda * lin.h[(i, i)];
        }
        let Some(chol) = a.cholesky() else {
            lambda *= lm.lambda_up;
            continue;
        };
        let delta = -chol.solve(&lin.g);
        let candidate = pose.retract(&delta);
        let cand_cost = problem.cost(&candidate);
        if cand_cost < lin.cost {
            let rel = (lin.cost - cand_cost) / lin.cost;
            pose = candidate;
            lin = problem.linearize(&pose);
            lambda *= lm.lambda_down;
            converged = delta.norm() < lm.step_tol || rel < lm.cost_tol || lin.cost == 0.0;
        } else {
            lambda *= lm.lambda_up;
            converged = delta.norm() < lm.step_tol;
        }
    }

    let point_inliers = points
        .iter()
        .map(|p| {
            point_residual(&p.landmark, &p.observation, &pose, cam).is_some_and(|e| e.norm() <= params.inlier_threshold)
        })
        .collect();
    let line_inliers = lines
        .iter()
        .map(|l| {
            line_vertical_residual(&l.landmark.start, &l.landmark.end, (&l.observation.start, &l.observation.end), &pose, cam)
                .is_some_and(|e| e.norm() <= params.inlier_threshold)
        })
        .collect();

    Ok(PoseEstimate {
        pose,
        initial_cost,
        cost: lin.cost,
        iterations,
        converged,
        weights: lin.weights,
        point_inliers,
        line_inliers,
        blocks: lin.blocks,
    })
}

fn is_rank_deficient(h: &Matrix6<f64>) -> bool {
    let eig = h.symmetric_eigenvalues();
    let max = eig.max();
    !(max > 0.0) || eig.min() <= max * 1e-12
}
