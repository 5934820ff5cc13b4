//! Histogram-based loop detection, geometric and neighbour verification,
//! pose-graph correction and the final global bundle adjustment.

mod pgo;

pub use pgo::{optimize_pose_graph, EdgeKind, PgoError, PgoReport, PoseGraph, PoseGraphEdge};

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::camera::StereoCamera;
use crate::estimation::{estimate_pose, EstimationParams, LmParams, PointCorrespondence};
use crate::features::Landmark3D;
use crate::geometry::Pose;
use crate::ggs::{ggs_dissimilarity, GgsDescriptor, GgsError};
use crate::mapping::{bundle_adjust, BaError, BaParams, BaReport, KeyframeId, LandmarkKey, LocalMap, Observation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopParams {
    /// Most recent keyframes never considered as loop targets.
    pub exclusion_window: usize,
    /// Fixed similarity threshold; `None` uses `sim_factor` times the median
    /// consecutive-keyframe dissimilarity.
    pub sim_threshold: Option<f64>,
    pub sim_factor: f64,
    pub neighbor_factor: f64,
    pub inlier_min: f64,
    pub lc_alpha: f64,
    pub lc_min: f64,
    /// Apply the literal `lc_rat >= lc_min` gate.
    pub strict_paper: bool,
    /// Drift bound as a fraction of the path travelled since the looped keyframe.
    pub max_drift_fraction: f64,
    /// Candidates verified per query, best first.
    pub max_candidates: usize,
    /// Shared-feature fraction for covisibility edges in the pose graph.
    pub pgo_covis_fraction: f64,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            exclusion_window: 30,
            sim_threshold: None,
            sim_factor: 2.0,
            neighbor_factor: 1.5,
            inlier_min: 0.5,
            lc_alpha: 0.001,
            lc_min: 0.2,
            strict_paper: false,
            max_drift_fraction: 0.1,
            max_candidates: 3,
            pgo_covis_fraction: 0.2,
        }
    }
}

/// Descriptor history of past keyframes, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct LoopDetector {
    history: Vec<(KeyframeId, GgsDescriptor)>,
    consecutive: Vec<f64>,
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Historical keyframes older than the exclusion window whose
/// dissimilarity to `query` is below `threshold`, most similar first.
pub fn find_loop_candidates(
    query: &GgsDescriptor,
    history: &[(KeyframeId, GgsDescriptor)],
    exclusion_window: usize,
    threshold: f64,
) -> Result<Vec<(KeyframeId, f64)>, GgsError> {
    let searchable = history.len().saturating_sub(exclusion_window);
    let mut out = Vec::new();
    for (id, d) in &history[..searchable] {
        let s = ggs_dissimilarity(query, d)?;
        if s < threshold {
            out.push((*id, s));
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

impl LoopDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn history(&self) -> &[(KeyframeId, GgsDescriptor)] {
        &self.history
    }

    pub fn add(&mut self, kf: KeyframeId, ggs: GgsDescriptor) -> Result<(), GgsError> {
        if let Some((_, prev)) = self.history.last() {
            self.consecutive.push(ggs_dissimilarity(prev, &ggs)?);
        }
        self.history.push((kf, ggs));
        Ok(())
    }

    /// Median dissimilarity between consecutive keyframes so far.
    pub fn reference_similarity(&self) -> Option<f64> {
        median(&self.consecutive)
    }

    pub fn threshold(&self, params: &LoopParams) -> f64 {
        params
            .sim_threshold
            .or_else(|| self.reference_similarity().map(|m| params.sim_factor * m))
            .unwrap_or(f64::INFINITY)
    }

    /// Candidates for a keyframe not yet added to the history.
    pub fn candidates(&self, query: &GgsDescriptor, params: &LoopParams) -> Result<Vec<(KeyframeId, f64)>, GgsError> {
        find_loop_candidates(query, &self.history, params.exclusion_window, self.threshold(params))
    }

    fn descriptor(&self, kf: KeyframeId) -> Option<(usize, &GgsDescriptor)> {
        self.history
            .iter()
            .position(|(k, _)| *k == kf)
            .map(|i| (i, &self.history[i].1))
    }

    /// Neighbour consistency: the keyframes adjacent to the looped one must
    /// also resemble the query. Returns `(accepted, best neighbour score)`.
    pub fn neighbor_check(
        &self,
        query: &GgsDescriptor,
        looped: KeyframeId,
        params: &LoopParams,
    ) -> Result<(bool, Option<f64>), GgsError> {
        let Some((pos, d)) = self.descriptor(looped) else {
            return Ok((true, None));
        };
        let s0 = ggs_dissimilarity(query, d)?;
        let mut best: Option<f64> = None;
        for p in [pos.checked_sub(1), Some(pos + 1)].into_iter().flatten() {
            if let Some((_, nd)) = self.history.get(p) {
                let s = ggs_dissimilarity(query, nd)?;
                best = Some(best.map_or(s, |b: f64| b.min(s)));
            }
        }
        let Some(s_adj) = best else { return Ok((true, None)) };
        if s0 == 0.0 {
            return Ok((true, Some(s_adj)));
        }
        let reference = self.reference_similarity().unwrap_or(0.0).max(s0);
        Ok((s_adj < params.neighbor_factor * reference, Some(s_adj)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopCandidate {
    pub current: KeyframeId,
    pub looped: KeyframeId,
    pub sim_v: f64,
    /// Current-from-looped camera transform measured from the matches.
    pub measured: Pose,
    /// `T_i * T_j^-1`: the current pose estimate against the pose implied by
    /// the loop measurement.
    pub relative: Pose,
    pub ratio_inl: f64,
    pub lc_rat: f64,
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum LoopRejection {
    #[error("relative pose could not be solved")]
    Unsolvable,
    #[error("inlier ratio {0:.3} below the minimum")]
    LowInliers(f64),
    #[error("loop implies {0:.3} of drift, above the bound")]
    ExcessiveDrift(f64),
    #[error("lc_rat {0:.5} below the literal threshold")]
    LowLcRat(f64),
    #[error("adjacent keyframes disagree with the loop")]
    NeighborInconsistent,
}

/// Outcome of verifying one candidate; `candidate` is present whenever the
/// relative pose could be solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopVerification {
    pub current: KeyframeId,
    pub looped: KeyframeId,
    pub sim_v: f64,
    pub candidate: Option<LoopCandidate>,
    pub rejection: Option<LoopRejection>,
}

impl LoopVerification {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }
}

fn path_length(map: &LocalMap, from: KeyframeId, to: KeyframeId) -> f64 {
    let poses: Vec<_> = map.keyframes.range(from..=to).map(|(_, kf)| *kf.pose.translation()).collect();
    poses.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Two-stage verification of a loop between the keyframes `current` and
/// `looped`, both already in `map`. `detector` must not contain `current`
/// among its neighbours of `looped`.
#[allow(clippy::too_many_arguments)]
pub fn verify_candidate(
    map: &LocalMap,
    detector: &LoopDetector,
    current: KeyframeId,
    query: &GgsDescriptor,
    looped: KeyframeId,
    sim_v: f64,
    cam: &StereoCamera,
    params: &LoopParams,
    est: &EstimationParams,
) -> LoopVerification {
    let mut out = LoopVerification {
        current,
        looped,
        sim_v,
        candidate: None,
        rejection: Some(LoopRejection::Unsolvable),
    };
    let (Some(kc), Some(kl)) = (map.keyframes.get(&current), map.keyframes.get(&looped)) else {
        return out;
    };
    let looped_obs = kl.by_feature();
    let t_lw = kl.pose.inverse();
    let mut points = Vec::new();
    let mut current_points = 0usize;
    for o in kc.observations.values() {
        let Observation::Point(px) = o.observation else { continue };
        current_points += 1;
        let LandmarkKey::Point(id) = o.key else { continue };
        let Some((lid, _)) = looped_obs.get(&o.key) else { continue };
        let Some(Landmark3D::Point(xw)) = map.landmarks.get(lid).map(|l| l.geometry) else { continue };
        points.push(PointCorrespondence {
            id,
            landmark: t_lw.transform_point(&xw),
            observation: px,
        });
    }
    let guess = kc.pose.inverse() * kl.pose;
    let Ok(estimate) = estimate_pose(&points, &[], &guess, cam, est) else {
        return out;
    };
    let ratio_inl = if current_points == 0 {
        0.0
    } else {
        estimate.point_inliers.iter().filter(|&&b| b).count() as f64 / current_points as f64
    };
    let implied = kl.pose * estimate.pose.inverse();
    let relative = kc.pose * implied.inverse();
    let drift = relative.log().norm();
    let candidate = LoopCandidate {
        current,
        looped,
        sim_v,
        measured: estimate.pose,
        relative,
        ratio_inl,
        lc_rat: params.lc_alpha * drift * ratio_inl,
    };
    out.candidate = Some(candidate);

    out.rejection = if ratio_inl < params.inlier_min {
        Some(LoopRejection::LowInliers(ratio_inl))
    } else if drift > params.max_drift_fraction * path_length(map, looped, current) {
        Some(LoopRejection::ExcessiveDrift(drift))
    } else if params.strict_paper && candidate.lc_rat < params.lc_min {
        Some(LoopRejection::LowLcRat(candidate.lc_rat))
    } else {
        match detector.neighbor_check(query, looped, params) {
            Ok((true, _)) => None,
            _ => Some(LoopRejection::NeighborInconsistent),
        }
    };
    out
}

/// Builds the pose graph: sequential odometry edges, covisibility edges
/// between keyframes sharing at least `covis_fraction` of the smaller
/// observation set, and the loop edge. Non-loop measurements come from the
/// current estimates, so only the loop edge carries new information.
pub fn build_pose_graph(map: &LocalMap, candidate: &LoopCandidate, covis_fraction: f64) -> PoseGraph {
    let nodes: BTreeMap<KeyframeId, Pose> = map.keyframes.iter().map(|(&k, kf)| (k, kf.pose)).collect();
    let rel = |a: KeyframeId, b: KeyframeId| nodes[&a].inverse() * nodes[&b];
    let ids: Vec<KeyframeId> = nodes.keys().copied().collect();
    let mut edges = Vec::new();
    let mut linked = BTreeSet::new();
    for w in ids.windows(2) {
        edges.push(PoseGraphEdge::new(w[0], w[1], rel(w[0], w[1]), EdgeKind::Odometry));
        linked.insert((w[0], w[1]));
    }
    for (a, b, shared) in map.covisibility.edges() {
        if linked.contains(&(a, b)) {
            continue;
        }
        let smaller = map.keyframes[&a].observations.len().min(map.keyframes[&b].observations.len());
        if smaller > 0 && shared as f64 >= covis_fraction * smaller as f64 {
            edges.push(PoseGraphEdge::new(a, b, rel(a, b), EdgeKind::Covisibility));
        }
    }
    edges.push(PoseGraphEdge::new(
        candidate.looped,
        candidate.current,
        candidate.measured.inverse(),
        EdgeKind::Loop,
    ));
    PoseGraph { nodes, edges }
}

/// Corrects all keyframe poses with the accepted loop and moves landmarks
/// with their anchor keyframes. On failure the map is left untouched.
pub fn correct_loop(
    map: &mut LocalMap,
    candidate: &LoopCandidate,
    params: &LoopParams,
    lm: &LmParams,
) -> Result<PgoReport, PgoError> {
    let graph = build_pose_graph(map, candidate, params.pgo_covis_fraction);
    let report = optimize_pose_graph(&graph, lm)?;
    if !(report.final_cost <= report.initial_cost) {
        return Err(PgoError::Diverged);
    }
    map.apply_pose_corrections(&report.poses);
    Ok(report)
}

/// Bundle adjustment over every keyframe with the first one fixed.
pub fn global_bundle_adjust(map: &mut LocalMap, cam: &StereoCamera, params: &BaParams) -> Result<BaReport, BaError> {
    let ids: BTreeSet<KeyframeId> = map.keyframes.keys().copied().collect();
    let Some(&first) = ids.iter().next() else {
        return Err(BaError::TooFewKeyframes(0));
    };
    if ids.len() < 2 {
        return Err(BaError::TooFewKeyframes(ids.len()));
    }
    let free: BTreeSet<KeyframeId> = ids.iter().copied().filter(|&k| k != first).collect();
    bundle_adjust(map, &free, &BTreeSet::from([first]), cam, params)
}
