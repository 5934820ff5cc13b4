//! Sparse bundle adjustment over keyframe poses and point/line landmarks.
//! Landmarks are eliminated with the Schur complement; the reduced pose
//! system is solved densely.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use thiserror::Error;

use super::{KeyframeId, LandmarkId, LocalMap, Observation};
use crate::camera::StereoCamera;
use crate::estimation::{
    huber, line_horizontal_residual, line_vertical_residual, normal_terms, point_residual, Evaluated, LmParams,
};
use crate::features::{Landmark3D, LineSegment3};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaParams {
    pub lm: LmParams,
    pub huber_delta: f64,
    pub edge_margin: f64,
    pub use_lines: bool,
    pub use_horizontal: bool,
    /// Keep keyframes outside the neighbourhood that observe its landmarks
    /// as fixed constraints.
    pub include_outside_observers: bool,
}

impl Default for BaParams {
    fn default() -> Self {
        Self {
            lm: LmParams {
                max_iters: 50,
                ..LmParams::default()
            },
            huber_delta: 2.0,
            edge_margin: 20.0,
            use_lines: true,
            use_horizontal: true,
            include_outside_observers: true,
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum BaError {
    #[error("bundle adjustment needs at least 2 keyframes, got {0}")]
    TooFewKeyframes(usize),
    #[error("bundle adjustment system is singular")]
    Singular,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BaReport {
    pub optimized: Vec<KeyframeId>,
    pub fixed: Vec<KeyframeId>,
    pub landmarks: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub initial_rms: f64,
    pub final_rms: f64,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone, Copy)]
enum Slot {
    Free(usize),
    Fixed(Pose),
}

struct Obs {
    slot: Slot,
    landmark: usize,
    observation: Observation,
}

struct Problem<'a> {
    cam: &'a StereoCamera,
    params: &'a BaParams,
    obs: Vec<Obs>,
    /// Observation index ranges per landmark.
    ranges: Vec<std::ops::Range<usize>>,
    is_point: Vec<bool>,
}

#[derive(Clone)]
struct State {
    /// Camera-from-world of the free keyframes.
    poses: Vec<Pose>,
    /// Point in `0..3`, or line start in `0..3` and end in `3..6`.
    landmarks: Vec<Vector6<f64>>,
}

struct LandmarkTerms {
    hll: Matrix6<f64>,
    gl: Vector6<f64>,
    hpl: Vec<(usize, Matrix6<f64>)>,
}

struct Linearization {
    cost: f64,
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    landmarks: Vec<LandmarkTerms>,
}

impl Problem<'_> {
    fn pose(&self, slot: Slot, state: &State) -> Pose {
        match slot {
            Slot::Free(i) => state.poses[i],
            Slot::Fixed(p) => p,
        }
    }

    fn evaluate(&self, o: &Obs, state: &State, out: &mut Vec<Evaluated>) {
        let pose = self.pose(o.slot, state);
        let x = &state.landmarks[o.landmark];
        let a = Vector3::new(x[0], x[1], x[2]);
        match o.observation {
            Observation::Point(px) => out.extend(point_residual(&a, &px, &pose, self.cam)),
            Observation::Line { start, end } => {
                if !self.params.use_lines {
                    return;
                }
                let b = Vector3::new(x[3], x[4], x[5]);
                out.extend(line_vertical_residual(&a, &b, (&start, &end), &pose, self.cam));
                if self.params.use_horizontal {
                    out.extend(line_horizontal_residual(
                        &a,
                        &b,
                        (&start, &end),
                        &pose,
                        self.cam,
                        self.params.edge_margin,
                    ));
                }
            }
        }
    }

    fn cost_and_sq(&self, state: &State) -> (f64, f64, usize) {
        let mut buf = Vec::with_capacity(2);
        let (mut cost, mut sq, mut n) = (0.0, 0.0, 0);
        for o in &self.obs {
            buf.clear();
            self.evaluate(o, state, &mut buf);
            for e in &buf {
                cost += huber(e.norm(), self.params.huber_delta).0;
                sq += e.residual.norm_squared();
                n += e.dim();
            }
        }
        (cost, sq, n)
    }

    fn linearize(&self, state: &State) -> Linearization {
        let np = state.poses.len();
        let mut lin = Linearization {
            cost: 0.0,
            hpp: DMatrix::zeros(6 * np, 6 * np),
            gp: DVector::zeros(6 * np),
            landmarks: Vec::with_capacity(self.ranges.len()),
        };
        let mut buf = Vec::with_capacity(2);
        for (j, range) in self.ranges.iter().enumerate() {
            let mut t = LandmarkTerms {
                hll: Matrix6::zeros(),
                gl: Vector6::zeros(),
                hpl: Vec::new(),
            };
            for o in &self.obs[range.clone()] {
                buf.clear();
                self.evaluate(o, state, &mut buf);
                for e in &buf {
                    let (rho, w) = huber(e.norm(), self.params.huber_delta);
                    lin.cost += rho;
                    let (hll, gl) = normal_terms(&e.jac_landmark, &e.residual, e.dim(), w);
                    t.hll += hll;
                    t.gl += gl;
                    if let Slot::Free(i) = o.slot {
                        let (hpp, gp) = normal_terms(&e.jac_pose, &e.residual, e.dim(), w);
                        let mut view = lin.hpp.fixed_view_mut::<6, 6>(6 * i, 6 * i);
                        view += hpp;
                        let mut gview = lin.gp.fixed_rows_mut::<6>(6 * i);
                        gview += gp;
                        let mut jt = e.jac_pose.transpose();
                        if e.dim() == 1 {
                            jt.set_column(1, &Vector6::zeros());
                        }
                        let hpl = jt * e.jac_landmark * w;
                        match t.hpl.last_mut() {
                            Some((k, m)) if *k == i => *m += hpl,
                            _ => t.hpl.push((i, hpl)),
                        }
                    }
                }
            }
            if self.is_point[j] {
                // Pad the unused half so the 6x6 block stays invertible.
                t.hll.fixed_view_mut::<3, 3>(3, 3).fill_with_identity();
            }
            lin.landmarks.push(t);
        }
        lin
    }

    /// Damped Schur-complement step `(delta_poses, delta_landmarks)`.
    fn solve(&self, lin: &Linearization, lambda: f64) -> Option<(DVector<f64>, Vec<Vector6<f64>>)> {
        let mut s = lin.hpp.clone();
        for i in 0..s.nrows() {
            s[(i, i)] += lambda * lin.hpp[(i, i)];
        }
        let mut b = lin.gp.clone();
        let mut inverses = Vec::with_capacity(lin.landmarks.len());
        for t in &lin.landmarks {
            let mut a = t.hll;
            for i in 0..6 {
                a[(i, i)] += lambda * t.hll[(i, i)] + 1e-9;
            }
            let ainv = a.cholesky()?.inverse();
            for (i, hi) in &t.hpl {
                let hi_ainv = hi * ainv;
                let mut bview = b.fixed_rows_mut::<6>(6 * i);
                bview -= hi_ainv * t.gl;
                for (k, hk) in &t.hpl {
                    let mut view = s.fixed_view_mut::<6, 6>(6 * i, 6 * k);
                    view -= hi_ainv * hk.transpose();
                }
            }
            inverses.push(ainv);
        }
        let dp = if s.nrows() > 0 {
            -s.cholesky()?.solve(&b)
        } else {
            DVector::zeros(0)
        };
        let dl = lin
            .landmarks
            .iter()
            .zip(&inverses)
            .map(|(t, ainv)| {
                let mut rhs = t.gl;
                for (i, hi) in &t.hpl {
                    rhs += hi.transpose() * dp.fixed_rows::<6>(6 * i);
                }
                -(ainv * rhs)
            })
            .collect();
        Some((dp, dl))
    }

    fn apply(&self, state: &State, dp: &DVector<f64>, dl: &[Vector6<f64>]) -> State {
        let poses = state
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| p.retract(&dp.fixed_rows::<6>(6 * i).into_owned()))
            .collect();
        let landmarks = state
            .landmarks
            .iter()
            .zip(dl)
            .zip(&self.is_point)
            .map(|((x, d), &pt)| {
                let mut n = x + d;
                if pt {
                    n.fixed_rows_mut::<3>(3).fill(0.0);
                }
                n
            })
            .collect();
        State { poses, landmarks }
    }
}

fn rms(sq: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (sq / n as f64).sqrt()
    }
}

fn pack(lm: &Landmark3D) -> Vector6<f64> {
    match lm {
        Landmark3D::Point(p) => Vector6::new(p.x, p.y, p.z, 0.0, 0.0, 0.0),
        Landmark3D::Line(s) => Vector6::new(s.start.x, s.start.y, s.start.z, s.end.x, s.end.y, s.end.z),
    }
}

fn unpack(x: &Vector6<f64>, point: bool) -> Landmark3D {
    let a = Vector3::new(x[0], x[1], x[2]);
    if point {
        Landmark3D::Point(a)
    } else {
        Landmark3D::Line(LineSegment3::new(a, Vector3::new(x[3], x[4], x[5])))
    }
}

/// Optimizes the poses of `free` keyframes and every landmark they observe
/// that has at least two observations among `free` and `fixed`. Keyframes
/// in `fixed` contribute residuals but never move.
pub fn bundle_adjust(
    map: &mut LocalMap,
    free: &BTreeSet<KeyframeId>,
    fixed: &BTreeSet<KeyframeId>,
    cam: &StereoCamera,
    params: &BaParams,
) -> Result<BaReport, BaError> {
    let slot_of: BTreeMap<KeyframeId, Slot> = free
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, Slot::Free(i)))
        .chain(
            fixed
                .iter()
                .filter(|k| !free.contains(k))
                .filter_map(|&k| map.keyframes.get(&k).map(|kf| (k, Slot::Fixed(kf.pose.inverse())))),
        )
        .collect();

    let mut keys: Vec<LandmarkId> = Vec::new();
    let mut obs = Vec::new();
    let mut ranges = Vec::new();
    let mut is_point = Vec::new();
    let mut landmarks = Vec::new();
    for (key, lm) in &map.landmarks {
        if !params.use_lines && !lm.geometry.is_point() {
            continue;
        }
        let observers: Vec<KeyframeId> = lm.observers.iter().copied().filter(|k| slot_of.contains_key(k)).collect();
        if observers.len() < 2 || !observers.iter().any(|k| free.contains(k)) {
            continue;
        }
        let j = keys.len();
        let start = obs.len();
        for k in observers {
            obs.push(Obs {
                slot: slot_of[&k],
                landmark: j,
                observation: map.keyframes[&k].observations[key].observation,
            });
        }
        ranges.push(start..obs.len());
        keys.push(*key);
        is_point.push(lm.geometry.is_point());
        landmarks.push(pack(&lm.geometry));
    }

    let problem = Problem {
        cam,
        params,
        obs,
        ranges,
        is_point,
    };
    let mut state = State {
        poses: free.iter().map(|k| map.keyframes[k].pose.inverse()).collect(),
        landmarks,
    };

    let (c0, sq0, n0) = problem.cost_and_sq(&state);
    let mut report = BaReport {
        optimized: free.iter().copied().collect(),
        fixed: slot_of
            .iter()
            .filter(|(_, s)| matches!(s, Slot::Fixed(_)))
            .map(|(&k, _)| k)
            .collect(),
        landmarks: keys.len(),
        initial_cost: c0,
        final_cost: c0,
        initial_rms: rms(sq0, n0),
        final_rms: rms(sq0, n0),
        accepted_costs: vec![c0],
        converged: c0 == 0.0,
        ..BaReport::default()
    };

    let lm = &params.lm;
    let mut lin = problem.linearize(&state);
    let mut lambda = lm.lambda_init;
    let mut failures = 0;
    while !report.converged && report.iterations < lm.max_iters {
        report.iterations += 1;
        let Some((dp, dl)) = problem.solve(&lin, lambda) else {
            lambda *= lm.lambda_up;
            failures += 1;
            if failures > 10 {
                return Err(BaError::Singular);
            }
            continue;
        };
        let step = (dp.norm_squared() + dl.iter().map(|d| d.norm_squared()).sum::<f64>()).sqrt();
        let candidate = problem.apply(&state, &dp, &dl);
        let (cost, _, _) = problem.cost_and_sq(&candidate);
        if cost < lin.cost {
            let rel = (lin.cost - cost) / lin.cost;
            state = candidate;
            lin = problem.linearize(&state);
            lambda *= lm.lambda_down;
            report.accepted_costs.push(lin.cost);
            report.converged = step < lm.step_tol || rel < lm.cost_tol || lin.cost == 0.0;
        } else {
            lambda *= lm.lambda_up;
            report.converged = step < lm.step_tol;
        }
    }

    let (c1, sq1, n1) = problem.cost_and_sq(&state);
    report.final_cost = c1;
    report.final_rms = rms(sq1, n1);

    for (k, pose) in free.iter().zip(&state.poses) {
        map.keyframes.get_mut(k).unwrap().pose = pose.inverse();
    }
    for ((key, x), &pt) in keys.iter().zip(&state.landmarks).zip(&problem.is_point) {
        map.landmarks.get_mut(key).unwrap().geometry = unpack(x, pt);
    }
    Ok(report)
}

/// Bundle adjustment over `anchor` and its direct covisibility neighbours,
/// with the oldest of them held fixed as gauge.
pub fn local_bundle_adjust(
    map: &mut LocalMap,
    anchor: KeyframeId,
    cam: &StereoCamera,
    params: &BaParams,
) -> Result<BaReport, BaError> {
    let mut hood: BTreeSet<KeyframeId> = map.covisibility.neighbors(anchor).map(|(k, _)| k).collect();
    hood.insert(anchor);
    if hood.len() < 2 {
        return Err(BaError::TooFewKeyframes(hood.len()));
    }
    let gauge = *hood.iter().next().unwrap();
    let mut fixed = BTreeSet::from([gauge]);
    if params.include_outside_observers {
        for kf in &hood {
            for key in map.keyframes[kf].observations.keys() {
                if let Some(lm) = map.landmarks.get(key) {
                    fixed.extend(lm.observers.iter().filter(|o| !hood.contains(o)));
                }
            }
        }
    }
    hood.remove(&gauge);
    bundle_adjust(map, &hood, &fixed, cam, params)
}

/// Root-mean-square of every scalar residual component over the
/// observations made by `keyframes`.
pub fn reprojection_rms(map: &LocalMap, keyframes: &BTreeSet<KeyframeId>, cam: &StereoCamera, params: &BaParams) -> f64 {
    let (mut sq, mut n) = (0.0, 0);
    for k in keyframes {
        let kf = &map.keyframes[k];
        let pose = kf.pose.inverse();
        for (key, o) in &kf.observations {
            let Some(lm) = map.landmarks.get(key) else { continue };
            let o = &o.observation;
            let mut evals = Vec::new();
            match (o, &lm.geometry) {
                (Observation::Point(px), Landmark3D::Point(p)) => evals.extend(point_residual(p, px, &pose, cam)),
                (Observation::Line { start, end }, Landmark3D::Line(s)) if params.use_lines => {
                    evals.extend(line_vertical_residual(&s.start, &s.end, (start, end), &pose, cam));
                    if params.use_horizontal {
                        evals.extend(line_horizontal_residual(&s.start, &s.end, (start, end), &pose, cam, params.edge_margin));
                    }
                }
                _ => {}
            }
            for e in evals {
                sq += e.residual.norm_squared();
                n += e.dim();
            }
        }
    }
    rms(sq, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Frame, LineFeature2D, PointFeature2D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cam() -> StereoCamera {
        StereoCamera::new(700.0, 700.0, 620.0, 188.0, 0.5, 1242, 376).unwrap()
    }

    /// Five keyframes moving forward through a cloud of points and lines,
    /// observed exactly.
    fn exact_map(rng: &mut ChaCha8Rng) -> LocalMap {
        let c = cam();
        let pts: Vec<Vector3<f64>> = (0..300)
            .map(|_| Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-3.0..2.0), rng.random_range(10.0..40.0)))
            .collect();
        let lines: Vec<(Vector3<f64>, Vector3<f64>)> = (0..40)
            .map(|_| {
                let s = Vector3::new(rng.random_range(-6.0..6.0), rng.random_range(-2.0..1.0), rng.random_range(12.0..35.0));
                (s, s + Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 0.3))
            })
            .collect();
        let mut map = LocalMap::new(20);
        for k in 0..5 {
            let twc = Pose::exp(&Vector6::new(0.1 * k as f64, 0.0, 0.8 * k as f64, 0.0, 0.01 * k as f64, 0.0));
            let tcw = twc.inverse();
            let mut f = Frame::new(k, k as f64);
            f.pose = twc;
            for (id, p) in pts.iter().enumerate() {
                let pc = tcw.transform_point(p);
                if let Some(px) = c.project(&pc) {
                    if c.contains(&px) && pc.z > 2.0 {
                        f.points.push(PointFeature2D::stereo(id as u64, px.x, px.y, c.bf() / pc.z));
                    }
                }
            }
            for (id, (s, e)) in lines.iter().enumerate() {
                let (sc, ec) = (tcw.transform_point(s), tcw.transform_point(e));
                if let (Some(a), Some(b)) = (c.project(&sc), c.project(&ec)) {
                    if c.contains(&a) && c.contains(&b) && sc.z > 2.0 && ec.z > 2.0 {
                        f.lines.push(LineFeature2D::new(id as u64, a, b).unwrap().with_disparity(c.bf() / sc.z, c.bf() / ec.z));
                    }
                }
            }
            map.insert_keyframe(&f, &c);
        }
        map
    }

    fn perturb(map: &mut LocalMap, rng: &mut ChaCha8Rng, sigma: f64) {
        let n = Normal::new(0.0, sigma).unwrap();
        for lm in map.landmarks.values_mut() {
            let mut d = || Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            lm.geometry = match lm.geometry {
                Landmark3D::Point(p) => Landmark3D::Point(p + d()),
                Landmark3D::Line(s) => Landmark3D::Line(LineSegment3::new(s.start + d(), s.end + d())),
            };
        }
    }

    fn all(map: &LocalMap) -> BTreeSet<KeyframeId> {
        map.keyframes.keys().copied().collect()
    }

    #[test]
    fn perturbed_landmarks_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut map = exact_map(&mut rng);
        assert_eq!(map.covisibility.neighbors(4).count(), 4);
        perturb(&mut map, &mut rng, 0.05);
        let params = BaParams::default();
        let gauge_before = map.keyframes[&0].pose;
        let report = local_bundle_adjust(&mut map, 4, &cam(), &params).unwrap();
        assert!(report.initial_rms > 0.1);
        assert!(report.final_rms < 1e-6, "rms {}", report.final_rms);
        assert!(report.accepted_costs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(map.keyframes[&0].pose, gauge_before);
        // Landmarks seen once are left alone, so the map-wide RMS stays above zero.
        assert!(reprojection_rms(&map, &all(&map), &cam(), &params) > report.final_rms);
    }

    #[test]
    fn optimal_map_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut map = exact_map(&mut rng);
        let before = map.to_dump();
        let report = local_bundle_adjust(&mut map, 4, &cam(), &BaParams::default()).unwrap();
        assert!(report.iterations <= 1);
        assert!(report.final_cost < 1e-12);
        // Round-off in the dump is the only admissible difference.
        let a: Vec<f64> = before.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        let b: Vec<f64> = map.to_dump().split_whitespace().filter_map(|t| t.parse().ok()).collect();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-8));
    }

    #[test]
    fn single_keyframe_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut map = exact_map(&mut rng);
        map.keyframes.retain(|&k, _| k == 0);
        map.recount_covisibility();
        assert_eq!(local_bundle_adjust(&mut map, 0, &cam(), &BaParams::default()), Err(BaError::TooFewKeyframes(1)));
    }

    #[test]
    fn noisy_pose_and_landmarks_reduce_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut map = exact_map(&mut rng);
        perturb(&mut map, &mut rng, 0.1);
        for k in 1..5 {
            let kf = map.keyframes.get_mut(&k).unwrap();
            kf.pose = Pose::exp(&Vector6::new(0.02, -0.01, 0.03, 0.002, 0.0, -0.001)) * kf.pose;
        }
        let outside = all(&map);
        let free: BTreeSet<_> = outside.iter().copied().filter(|&k| k != 0).collect();
        let report = bundle_adjust(&mut map, &free, &BTreeSet::from([0]), &cam(), &BaParams::default()).unwrap();
        assert!(report.final_cost < report.initial_cost);
        assert!(report.final_rms < 1e-6, "rms {}", report.final_rms);
        assert!(report.accepted_costs.windows(2).all(|w| w[1] <= w[0]));
    }
}
