//! Pose-graph optimization over world-from-camera keyframe poses.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use thiserror::Error;

use crate::estimation::LmParams;
use crate::geometry::{se3_right_jacobian_inv, Pose};
use crate::mapping::KeyframeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    Odometry,
    Covisibility,
    Loop,
}

/// Relative-pose constraint `measurement ~ T_from^-1 * T_to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGraphEdge {
    pub from: KeyframeId,
    pub to: KeyframeId,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
    pub kind: EdgeKind,
}

impl PoseGraphEdge {
    pub fn new(from: KeyframeId, to: KeyframeId, measurement: Pose, kind: EdgeKind) -> Self {
        Self {
            from,
            to,
            measurement,
            information: Matrix6::identity(),
            kind,
        }
    }

    /// `log(Z^-1 * T_from^-1 * T_to)`.
    pub fn error(&self, t_from: &Pose, t_to: &Pose) -> Vector6<f64> {
        (self.measurement.inverse() * t_from.inverse() * *t_to).log()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseGraph {
    pub nodes: BTreeMap<KeyframeId, Pose>,
    pub edges: Vec<PoseGraphEdge>,
}

impl PoseGraph {
    pub fn cost(&self, nodes: &BTreeMap<KeyframeId, Pose>) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let r = e.error(&nodes[&e.from], &nodes[&e.to]);
                (r.transpose() * e.information * r)[0]
            })
            .sum()
    }

    /// True when every node is reachable from the first one.
    pub fn is_connected(&self) -> bool {
        let Some(&first) = self.nodes.keys().next() else {
            return true;
        };
        let mut seen = std::collections::BTreeSet::from([first]);
        let mut stack = vec![first];
        while let Some(n) = stack.pop() {
            for e in &self.edges {
                let other = if e.from == n {
                    e.to
                } else if e.to == n {
                    e.from
                } else {
                    continue;
                };
                if seen.insert(other) {
                    stack.push(other);
                }
            }
        }
        seen.len() == self.nodes.len()
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum PgoError {
    #[error("pose graph is not connected")]
    Disconnected,
    #[error("pose graph optimization diverged")]
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgoReport {
    pub poses: BTreeMap<KeyframeId, Pose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_costs: Vec<f64>,
}

/// Levenberg-Marquardt on the pose graph with the lowest-id node fixed.
pub fn optimize_pose_graph(graph: &PoseGraph, lm: &LmParams) -> Result<PgoReport, PgoError> {
    if !graph.is_connected() {
        return Err(PgoError::Disconnected);
    }
    let ids: Vec<KeyframeId> = graph.nodes.keys().copied().collect();
    let index: BTreeMap<KeyframeId, usize> = ids.iter().skip(1).enumerate().map(|(i, &k)| (k, i)).collect();
    let n = index.len();

    let linearize = |nodes: &BTreeMap<KeyframeId, Pose>| {
        let mut h = DMatrix::<f64>::zeros(6 * n, 6 * n);
        let mut g = DVector::<f64>::zeros(6 * n);
        for e in &graph.edges {
            let (ti, tj) = (&nodes[&e.from], &nodes[&e.to]);
            let r = e.error(ti, tj);
            let jj = se3_right_jacobian_inv(&r) * tj.inverse().adjoint();
            let blocks = [(index.get(&e.from), -jj), (index.get(&e.to), jj)];
            for (a, ja) in &blocks {
                let Some(&a) = a else { continue };
                let jta = ja.transpose() * e.information;
                let mut gv = g.fixed_rows_mut::<6>(6 * a);
                gv += jta * r;
                for (b, jb) in &blocks {
                    let Some(&b) = b else { continue };
                    let mut hv = h.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                    hv += jta * jb;
                }
            }
        }
        (h, g)
    };

    let mut nodes = graph.nodes.clone();
    let mut cost = graph.cost(&nodes);
    let mut report = PgoReport {
        poses: BTreeMap::new(),
        initial_cost: cost,
        final_cost: cost,
        iterations: 0,
        accepted_costs: vec![cost],
    };
    if !cost.is_finite() {
        return Err(PgoError::Diverged);
    }
    let (mut h, mut g) = linearize(&nodes);
    let mut lambda = lm.lambda_init;
    let mut done = cost == 0.0 || n == 0;
    while !done && report.iterations < lm.max_iters {
        report.iterations += 1;
        let mut a = h.clone();
        for i in 0..6 * n {
            a[(i, i)] += lambda * h[(i, i)] + 1e-12;
        }
        let Some(chol) = a.cholesky() else {
            lambda *= lm.lambda_up;
            if lambda > 1e12 {
                return Err(PgoError::Diverged);
            }
            continue;
        };
        let delta = -chol.solve(&g);
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(PgoError::Diverged);
        }
        let mut candidate = nodes.clone();
        for (k, &i) in &index {
            let d = delta.fixed_rows::<6>(6 * i).into_owned();
            candidate.insert(*k, nodes[k].retract(&d));
        }
        let c = graph.cost(&candidate);
        if c < cost {
            let rel = (cost - c) / cost;
            nodes = candidate;
            cost = c;
            (h, g) = linearize(&nodes);
            lambda *= lm.lambda_down;
            report.accepted_costs.push(c);
            done = delta.norm() < lm.step_tol || rel < lm.cost_tol;
        } else {
            lambda *= lm.lambda_up;
            done = delta.norm() < lm.step_tol;
        }
    }
    report.final_cost = cost;
    report.poses = nodes;
    Ok(report)
}
