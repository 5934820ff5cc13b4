//! Dynamic-feature rejection. Points are scored per image grid cell against
//! a constant-velocity prediction, lines per local line group.

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};

use crate::association::{LineMatch, LocalLineGroup, PointMatch};
use crate::camera::StereoCamera;
use crate::features::{FeatureId, LineSegment3};
use crate::geometry::Pose;
use crate::grid::{GridCell, GridPartition};

/// Constant-velocity prior: the last inter-frame motion is assumed to repeat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionModel {
    /// Previous-camera-from-the-one-before; applied as current-from-previous.
    pub t_pp: Pose,
}

impl MotionModel {
    pub fn new(t_pp: Pose) -> Self {
        Self { t_pp }
    }

    pub fn identity() -> Self {
        Self { t_pp: Pose::identity() }
    }
}

/// How the per-group line errors are reduced before thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LlgReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsParams {
    /// Per-grid mean squared point prediction error bound (px^2).
    pub tau_pt: f64,
    /// Per-group line error bound (px^2).
    pub rho: f64,
    pub reduction: LlgReduction,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            tau_pt: 4.0,
            rho: 4.0,
            reduction: LlgReduction::Mean,
        }
    }
}

/// Predicted pixel of a point given in the previous camera frame.
/// `None` when the moved point lies behind the camera.
pub fn predict_point(prev_cam_point: &Vector3<f64>, model: &MotionModel, cam: &StereoCamera) -> Option<Vector2<f64>> {
    cam.project(&model.t_pp.transform_point(prev_cam_point))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGridMap {
    pub partition: GridPartition,
    /// Flagged cells after 8-neighbour dilation, row-major.
    pub mask: Vec<bool>,
    /// Mean squared prediction error of the cells that had scored points.
    pub mean_sq_error: Vec<Option<f64>>,
}

impl DynamicGridMap {
    pub fn empty(partition: GridPartition) -> Self {
        Self {
            partition,
            mask: vec![false; partition.len()],
            mean_sq_error: vec![None; partition.len()],
        }
    }

    pub fn is_flagged(&self, cell: GridCell) -> bool {
        self.mask[self.partition.index(cell)]
    }

    pub fn is_dynamic_pixel(&self, u: f64, v: f64) -> bool {
        self.partition
            .cell_of_point(u, v)
            .is_some_and(|c| self.is_flagged(c))
    }

    /// Cells whose own error exceeded the threshold, before dilation.
    pub fn over_threshold(&self, tau_pt: f64) -> impl Iterator<Item = GridCell> + '_ {
        self.mean_sq_error
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.is_some_and(|e| e > tau_pt))
            .map(|(i, _)| self.partition.cell_at(i))
    }

    pub fn flagged_count(&self) -> usize {
        self.mask.iter().filter(|&&f| f).count()
    }
}

/// Scores each match by the squared distance between its current detection
/// and the prediction from its previous-frame triangulation, averages per
/// grid cell of the current detection, and flags every cell over `tau_pt`
/// together with its 8 neighbours. Matches without a previous disparity or
/// predicted behind the camera are not scored.
pub fn detect_dynamic_grids(
    matches: &[PointMatch],
    model: &MotionModel,
    cam: &StereoCamera,
    partition: GridPartition,
    tau_pt: f64,
) -> DynamicGridMap {
    let mut sums = vec![(0.0, 0usize); partition.len()];
    for m in matches {
        let Ok(p) = cam.triangulate_point(&m.prev) else { continue };
        let Some(pred) = predict_point(&p, model, cam) else { continue };
        let Some(cell) = partition.cell_of_point(m.curr.u, m.curr.v) else { continue };
        let s = &mut sums[partition.index(cell)];
        s.0 += (m.curr.pixel() - pred).norm_squared();
        s.1 += 1;
    }
    let mut map = DynamicGridMap::empty(partition);
    map.mean_sq_error = sums
        .iter()
        .map(|&(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    let over: Vec<GridCell> = map.over_threshold(tau_pt).collect();
    for cell in over {
        for nb in partition.neighborhood(cell) {
            map.mask[partition.index(nb)] = true;
        }
    }
    map
}

/// Perpendicular distance from `p` to the infinite line through `a` and `b`.
fn point_line_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let d = b - a;
    ((p - a).perp(&d) / d.norm()).abs()
}

/// Squared mean distance of the predicted endpoints to the detected
/// (infinite) current line. `prev_line` is in the previous camera frame.
pub fn line_dynamic_error(
    line_match: &LineMatch,
    prev_line: &LineSegment3,
    model: &MotionModel,
    cam: &StereoCamera,
) -> Option<f64> {
    let s = predict_point(&prev_line.start, model, cam)?;
    let e = predict_point(&prev_line.end, model, cam)?;
    if (e - s).norm() == 0.0 {
        return None;
    }
    let (a, b) = (line_match.curr.start, line_match.curr.end);
    let mean = 0.5 * (point_line_distance(&s, &a, &b) + point_line_distance(&e, &a, &b));
    Some(mean * mean)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynamicLlgSet {
    /// Indices into the current-frame group list.
    pub flagged: Vec<usize>,
    /// Reduced error per group; `None` when no member could be scored.
    pub errors: Vec<Option<f64>>,
    pub dynamic_lines: BTreeSet<FeatureId>,
}

impl DynamicLlgSet {
    pub fn is_dynamic_line(&self, id: FeatureId) -> bool {
        self.dynamic_lines.contains(&id)
    }
}

/// Flags a current-frame group when its reduced member error exceeds `rho`;
/// all members of a flagged group are marked dynamic. Members are scored
/// when their previous observation carries endpoint disparities.
pub fn detect_dynamic_llgs(
    line_matches: &[LineMatch],
    llgs_curr: &[LocalLineGroup],
    model: &MotionModel,
    cam: &StereoCamera,
    rho: f64,
    reduction: LlgReduction,
) -> DynamicLlgSet {
    let mut out = DynamicLlgSet::default();
    for (gi, llg) in llgs_curr.iter().enumerate() {
        let errs: Vec<f64> = line_matches
            .iter()
            .filter(|m| llg.contains(m.curr.id))
            .filter_map(|m| {
                let seg = cam.triangulate_stereo_line(&m.prev).ok()?;
                line_dynamic_error(m, &seg, model, cam)
            })
            .collect();
        let reduced = (!errs.is_empty()).then(|| {
            let sum: f64 = errs.iter().sum();
            match reduction {
                LlgReduction::Mean => sum / errs.len() as f64,
                LlgReduction::Sum => sum,
            }
        });
        if reduced.is_some_and(|e| e > rho) {
            out.flagged.push(gi);
            out.dynamic_lines.extend(llg.members.iter().copied());
        }
        out.errors.push(reduced);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::{build_llgs, match_lines_by_id, match_points_by_id};
    use crate::features::{LineFeature2D, PointFeature2D};
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> StereoCamera {
        StereoCamera::new(700.0, 700.0, 620.0, 188.0, 0.5, 1242, 376).unwrap()
    }

    fn observe(cam: &StereoCamera, id: u64, p: &Vector3<f64>) -> Option<PointFeature2D> {
        let px = cam.project(p)?;
        cam.contains(&px).then(|| PointFeature2D::stereo(id, px.x, px.y, cam.bf() / p.z))
    }

    fn observe_line(cam: &StereoCamera, id: u64, s: &Vector3<f64>, e: &Vector3<f64>) -> LineFeature2D {
        let (a, b) = (cam.project(s).unwrap(), cam.project(e).unwrap());
        LineFeature2D::new(id, a, b)
            .unwrap()
            .with_disparity(cam.bf() / s.z, cam.bf() / e.z)
    }

    fn motion() -> Pose {
        Pose::exp(&Vector6::new(0.05, -0.01, -0.6, 0.002, 0.01, -0.003))
    }

    #[test]
    fn identity_prediction_returns_observation() {
        let c = cam();
        let f = PointFeature2D::stereo(0, 400.5, 100.25, 20.0);
        let p = c.triangulate_point(&f).unwrap();
        let pred = predict_point(&p, &MotionModel::identity(), &c).unwrap();
        assert!((pred - f.pixel()).norm() < 1e-9);
    }

    #[test]
    fn prediction_matches_projection_oracle() {
        let c = cam();
        let t = motion();
        let p = Vector3::new(1.0, -0.5, 12.0);
        let q = t.rotation() * p + t.translation();
        let oracle = Vector2::new(c.fx * q.x / q.z + c.cx, c.fy * q.y / q.z + c.cy);
        let pred = predict_point(&p, &MotionModel::new(t), &c).unwrap();
        assert!((pred - oracle).norm() < 1e-6);
    }

    #[test]
    fn point_behind_camera_after_motion_is_excluded() {
        let t = Pose::from_translation(Vector3::new(0.0, 0.0, -10.0));
        assert!(predict_point(&Vector3::new(0.0, 0.0, 5.0), &MotionModel::new(t), &cam()).is_none());
    }

    fn static_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(8.0..30.0),
                )
            })
            .collect()
    }

    fn frame_pair(pts: &[Vector3<f64>], t: &Pose) -> (Vec<PointFeature2D>, Vec<PointFeature2D>) {
        let c = cam();
        let mut prev = vec![];
        let mut curr = vec![];
        for (i, p) in pts.iter().enumerate() {
            if let (Some(a), Some(b)) = (observe(&c, i as u64, p), observe(&c, i as u64, &t.transform_point(p))) {
                prev.push(a);
                curr.push(b);
            }
        }
        (prev, curr)
    }

    fn partition() -> GridPartition {
        GridPartition::new(64, 48, 1242, 376)
    }

    #[test]
    fn static_scene_exact_model_flags_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = static_scene(&mut rng, 400);
        let t = motion();
        let (prev, curr) = frame_pair(&pts, &t);
        let m = match_points_by_id(&prev, &curr, &partition());
        let map = detect_dynamic_grids(&m, &MotionModel::new(t), &cam(), partition(), 4.0);
        assert_eq!(map.flagged_count(), 0);
    }

    #[test]
    fn moving_block_flags_cells_and_border() {
        let c = cam();
        let g = partition();
        // Points in cells (10..=12, 10..=12) displaced 20 px horizontally.
        let mut prev = vec![];
        let mut curr = vec![];
        let mut id = 0;
        for col in 0..64 {
            for row in 0..48 {
                let (cs, rs) = (g.col_span(col), g.row_span(row));
                let u = (cs.start + cs.end) as f64 / 2.0;
                let v = (rs.start + rs.end) as f64 / 2.0;
                prev.push(PointFeature2D::stereo(id, u, v, 30.0));
                let du = if (10..=12).contains(&col) && (10..=12).contains(&row) { 20.0 } else { 0.0 };
                curr.push(PointFeature2D::stereo(id, u + du, v, 30.0));
                id += 1;
            }
        }
        let m = match_points_by_id(&prev, &curr, &g);
        let map = detect_dynamic_grids(&m, &MotionModel::identity(), &c, g, 4.0);
        // The displaced detections land in the cells one or two columns to the
        // right; evaluate the rule directly on where they fall.
        let mut over = BTreeSet::new();
        for mm in &m {
            if (mm.curr.u - mm.prev.u).abs() > 0.0 {
                over.insert(g.cell_of_point(mm.curr.u, mm.curr.v).unwrap());
            }
        }
        let mut expect = BTreeSet::new();
        for cell in &over {
            expect.extend(g.neighborhood(*cell));
        }
        let got: BTreeSet<_> = (0..g.len()).filter(|&i| map.mask[i]).map(|i| g.cell_at(i)).collect();
        assert_eq!(got, expect);
        // Closure under dilation of the over-threshold cells.
        for cell in map.over_threshold(4.0) {
            assert!(g.neighborhood(cell).all(|nb| map.is_flagged(nb)));
        }
    }

    #[test]
    fn static_line_has_zero_error() {
        let c = cam();
        let t = motion();
        let (s, e) = (Vector3::new(-1.0, 0.5, 10.0), Vector3::new(1.5, -0.2, 12.0));
        let prev = observe_line(&c, 0, &s, &e);
        let curr = observe_line(&c, 0, &t.transform_point(&s), &t.transform_point(&e));
        let m = LineMatch::new(prev, curr);
        let seg = c.triangulate_stereo_line(&prev).unwrap();
        let err = line_dynamic_error(&m, &seg, &MotionModel::new(t), &c).unwrap();
        assert!(err < 1e-16);
    }

    #[test]
    fn parallel_offset_gives_squared_distance() {
        let c = cam();
        let prev = LineFeature2D::new(0, Vector2::new(500.0, 100.0), Vector2::new(600.0, 100.0))
            .unwrap()
            .with_disparity(20.0, 20.0);
        let curr = LineFeature2D::new(0, Vector2::new(480.0, 103.0), Vector2::new(650.0, 103.0)).unwrap();
        let seg = c.triangulate_stereo_line(&prev).unwrap();
        let err = line_dynamic_error(&LineMatch::new(prev, curr), &seg, &MotionModel::identity(), &c).unwrap();
        assert!((err - 9.0).abs() < 1e-9);
    }

    #[test]
    fn line_error_matches_distance_oracle() {
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(6.0..20.0));
            let e = s + Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let prev = observe_line(&c, 0, &s, &e);
            let curr = LineFeature2D::new(
                0,
                Vector2::new(rng.random_range(100.0..1100.0), rng.random_range(20.0..350.0)),
                Vector2::new(rng.random_range(100.0..1100.0), rng.random_range(20.0..350.0)),
            )
            .unwrap();
            let t = motion();
            let seg = c.triangulate_stereo_line(&prev).unwrap();
            let Some(err) = line_dynamic_error(&LineMatch::new(prev, curr), &seg, &MotionModel::new(t), &c) else {
                continue;
            };
            // Distance via the implicit line equation a*x + b*y + c = 0.
            let (p, q) = (curr.start, curr.end);
            let (a, b) = (q.y - p.y, p.x - q.x);
            let cc = -(a * p.x + b * p.y);
            let dist = |x: Vector2<f64>| (a * x.x + b * x.y + cc).abs() / (a * a + b * b).sqrt();
            let ps = c.project(&t.transform_point(&seg.start)).unwrap();
            let pe = c.project(&t.transform_point(&seg.end)).unwrap();
            let oracle = ((dist(ps) + dist(pe)) / 2.0).powi(2);
            assert!((err - oracle).abs() <= 1e-9 * oracle.max(1.0));
        }
    }

    /// A static cluster of three lines on a wall and a three-line object that
    /// moves from A to B between the frames while the camera moves as well.
    #[test]
    fn moving_object_group_is_the_only_one_flagged() {
        let c = cam();
        let t = motion();
        let wall = [
            (Vector3::new(-4.0, -1.0, 15.0), Vector3::new(-2.0, -1.0, 15.0)),
            (Vector3::new(-3.5, -0.8, 15.0), Vector3::new(-3.5, 0.8, 15.0)),
            (Vector3::new(-4.0, 0.5, 15.0), Vector3::new(-2.5, 0.5, 15.0)),
        ];
        let object = [
            (Vector3::new(2.0, -0.5, 10.0), Vector3::new(3.0, -0.5, 10.0)),
            (Vector3::new(2.5, -0.6, 10.0), Vector3::new(2.5, 0.4, 10.0)),
            (Vector3::new(2.0, 0.3, 10.0), Vector3::new(3.0, 0.3, 10.0)),
        ];
        let object_motion = Pose::from_translation(Vector3::new(0.6, 0.0, 0.0));
        let mut prev = vec![];
        let mut curr = vec![];
        for (i, (s, e)) in wall.iter().enumerate() {
            prev.push(observe_line(&c, i as u64, s, e));
            curr.push(observe_line(&c, i as u64, &t.transform_point(s), &t.transform_point(e)));
        }
        for (i, (s, e)) in object.iter().enumerate() {
            let id = 10 + i as u64;
            prev.push(observe_line(&c, id, s, e));
            let (ms, me) = (object_motion.transform_point(s), object_motion.transform_point(e));
            curr.push(observe_line(&c, id, &t.transform_point(&ms), &t.transform_point(&me)));
        }
        let llgs = build_llgs(&curr);
        assert_eq!(llgs.len(), 2);
        let matches = match_lines_by_id(&prev, &curr);
        let set = detect_dynamic_llgs(&matches, &llgs, &MotionModel::new(t), &c, 4.0, LlgReduction::Mean);
        assert_eq!(set.flagged.len(), 1);
        assert_eq!(llgs[set.flagged[0]].members, vec![10, 11, 12]);
        assert!(set.is_dynamic_line(11) && !set.is_dynamic_line(1));

        let none = detect_dynamic_llgs(&matches, &llgs, &MotionModel::new(t), &c, f64::INFINITY, LlgReduction::Mean);
        assert!(none.flagged.is_empty());
    }
}
