//! Synthetic stereo sequences with ground truth: a camera circling a textured
//! ring corridor, rigid boxes moving along the ring, and a label for every
//! generated observation.

use std::f64::consts::TAU;

use image::GrayImage;
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, StereoCamera};
use crate::features::{FeatureId, Frame, LineFeature2D, LineSegment3, PointFeature2D};
use crate::geometry::Pose;

/// Ids of features attached to body `b` start at `(b + 1) * BODY_ID_STRIDE`.
pub const BODY_ID_STRIDE: FeatureId = 1_000_000;

/// Generated pixel coordinates are rounded to multiples of 2^-24 px so that
/// disparities and their text form round-trip exactly.
const QUANTUM: f64 = 1.0 / 16_777_216.0;

fn quantize(x: f64) -> f64 {
    (x / QUANTUM).round() * QUANTUM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            fx: 718.856,
            fy: 718.856,
            cx: 607.1928,
            cy: 185.2157,
            baseline: 0.537,
            width: 1242,
            height: 376,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSpec {
    /// Radius of the circle driven by the camera (m).
    pub radius: f64,
    pub laps: f64,
    /// Radial shift accumulated per lap, so revisits are close but not identical (m).
    pub shift_per_lap: f64,
}

impl Default for PathSpec {
    fn default() -> Self {
        Self {
            radius: 25.0,
            laps: 1.0,
            shift_per_lap: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorSpec {
    /// Distance from the driven circle to each wall (m).
    pub half_width: f64,
    /// Floor height below the camera, y down (m).
    pub floor: f64,
    /// Highest wall landmark, negative is above the camera (m).
    pub top: f64,
    /// Edge of a texture block (m).
    pub texture_cell: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub wall_points: usize,
    pub floor_points: usize,
    pub wall_lines: usize,
    pub floor_lines: usize,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        Self {
            half_width: 4.0,
            floor: 1.6,
            top: -2.5,
            texture_cell: 0.8,
            min_depth: 1.0,
            max_depth: 40.0,
            wall_points: 8000,
            floor_points: 2000,
            wall_lines: 1500,
            floor_lines: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Gaussian pixel noise on every coordinate (px).
    pub sigma_px: f64,
    /// Fraction of each frame's observations replaced by random ones.
    pub outlier_rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_px: 0.0,
            outlier_rate: 0.0,
        }
    }
}

/// A box riding along the ring at `lead` metres of arc ahead of the camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodySpec {
    /// Width, height, length (m).
    pub size: [f64; 3],
    pub lead: f64,
    /// Speed along the ring relative to the camera.
    pub speed: f64,
    /// Radial offset from the driven circle, negative towards the centre (m).
    pub lateral: f64,
    /// Amplitude (m) and period (frames) of a radial oscillation.
    pub sway: f64,
    pub sway_period: f64,
    pub points: usize,
    pub lines: usize,
    pub shade: u8,
}

impl Default for BodySpec {
    fn default() -> Self {
        Self {
            size: [1.8, 1.5, 4.2],
            lead: 10.0,
            speed: 1.0,
            lateral: -1.5,
            sway: 0.5,
            sway_period: 40.0,
            points: 80,
            lines: 12,
            shade: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub frames: usize,
    pub rate_hz: f64,
    pub camera: CameraSpec,
    pub path: PathSpec,
    pub corridor: CorridorSpec,
    /// Caps on observations per frame; bodies are served first.
    pub points_per_frame: usize,
    pub lines_per_frame: usize,
    pub noise: NoiseSpec,
    /// Render the left image of every frame.
    pub render: bool,
    pub bodies: Vec<BodySpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 200,
            rate_hz: 10.0,
            camera: CameraSpec::default(),
            path: PathSpec::default(),
            corridor: CorridorSpec::default(),
            points_per_frame: 300,
            lines_per_frame: 80,
            noise: NoiseSpec::default(),
            render: true,
            bodies: Vec::new(),
        }
    }
}

impl SceneSpec {
    /// 200 frames, two moving boxes, 0.5 px noise.
    pub fn dynamic_fixture() -> Self {
        Self {
            noise: NoiseSpec {
                sigma_px: 0.5,
                outlier_rate: 0.0,
            },
            bodies: vec![
                BodySpec::default(),
                BodySpec {
                    size: [2.0, 2.2, 3.0],
                    lead: 16.0,
                    lateral: 1.8,
                    sway: 0.8,
                    sway_period: 30.0,
                    shade: 90,
                    ..BodySpec::default()
                },
            ],
            ..Self::default()
        }
    }

    /// Two slightly offset laps of a static corridor, 50 frames each.
    pub fn loop_fixture() -> Self {
        Self {
            frames: 100,
            path: PathSpec {
                laps: 2.0,
                shift_per_lap: 0.4,
                ..PathSpec::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SceneError> {
        let spec: Self = toml::from_str(text).map_err(|e| SceneError::Toml(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidSpec(m.to_string()));
        let c = &self.corridor;
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if !(self.rate_hz > 0.0) {
            return bad("rate_hz must be positive");
        }
        if !(self.path.radius > c.half_width && c.half_width > 0.0) {
            return bad("radius must exceed half_width, which must be positive");
        }
        if (self.path.shift_per_lap * self.path.laps).abs() >= c.half_width {
            return bad("path shift leaves the corridor");
        }
        if !(c.floor > 0.0 && c.top < c.floor) {
            return bad("floor must be below the camera and below top");
        }
        if !(c.texture_cell > 0.0 && c.min_depth > 0.0 && c.max_depth > c.min_depth) {
            return bad("texture_cell and depth range must be positive and ordered");
        }
        if !(self.noise.sigma_px >= 0.0 && (0.0..=1.0).contains(&self.noise.outlier_rate)) {
            return bad("sigma_px must be non-negative and outlier_rate in [0, 1]");
        }
        for b in &self.bodies {
            if !b.size.iter().all(|&s| s > 0.0) || !(b.sway_period > 0.0) {
                return bad("body size and sway_period must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("scene spec: {0}")]
    Toml(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("no landmark is visible in frame {0}")]
    NothingVisible(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Static,
    Dynamic,
    Outlier,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Static => "static",
            Label::Dynamic => "dynamic",
            Label::Outlier => "outlier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "static" => Some(Label::Static),
            "dynamic" => Some(Label::Dynamic),
            "outlier" => Some(Label::Outlier),
            _ => None,
        }
    }
}

/// Ground-truth label of every observation in one frame, in frame order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameLabels {
    pub points: Vec<(FeatureId, Label)>,
    pub lines: Vec<(FeatureId, Label)>,
}

impl FrameLabels {
    pub fn count(&self, label: Label) -> usize {
        self.points.iter().chain(&self.lines).filter(|(_, l)| *l == label).count()
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedFrame {
    pub frame: Frame,
    pub labels: FrameLabels,
}

#[derive(Debug, Clone)]
pub struct Body {
    pub spec: BodySpec,
    /// Surface points and segments in the body frame.
    pub points: Vec<Vector3<f64>>,
    pub lines: Vec<LineSegment3>,
    /// World-from-body per frame.
    pub poses: Vec<Pose>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub camera: StereoCamera,
    /// Timestamp and world-from-camera pose per frame; the world frame is
    /// the first camera frame.
    pub trajectory: Vec<(f64, Pose)>,
    pub points: Vec<Vector3<f64>>,
    pub lines: Vec<LineSegment3>,
    pub bodies: Vec<Body>,
    point_rank: Vec<u32>,
    line_rank: Vec<u32>,
    center: Vector3<f64>,
}

/// Frame orientation for heading angle `phi` along the ring: x right, y
/// down, z forward, turning left as `phi` grows.
fn ring_rotation(phi: f64) -> Matrix3<f64> {
    let (s, c) = phi.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

fn ring_point(center: &Vector3<f64>, radius: f64, phi: f64, y: f64) -> Vector3<f64> {
    center + Vector3::new(radius * phi.cos(), y, radius * phi.sin())
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn cell_hash(seed: u64, surface: u64, i: i64, j: i64) -> u64 {
    mix(mix(mix(seed ^ surface.wrapping_mul(0x1000_0000_01b3)) ^ i as u64) ^ (j as u64).rotate_left(32))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Surface {
    InnerWall,
    OuterWall,
    Floor,
    Body(usize, usize),
    Sky,
}

/// Smallest `t > eps` with `|o + t d - c|^2 = r^2` in the horizontal plane.
fn cylinder_hit(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let (ox, oz) = (o.x - c.x, o.z - c.z);
    let a = d.x * d.x + d.z * d.z;
    if a < 1e-18 {
        return None;
    }
    let b = ox * d.x + oz * d.z;
    let q = ox * ox + oz * oz - r * r;
    let disc = b * b - a * q;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > 1e-9)
}

/// Entry distance and face index of a ray against a box centred at the
/// origin of `pose` (world-from-box) with half extents `h`.
fn box_hit(o: &Vector3<f64>, d: &Vector3<f64>, pose: &Pose, h: &Vector3<f64>) -> Option<(f64, usize)> {
    let rt = pose.rotation().transpose();
    let ob = rt * (o - pose.translation());
    let db = rt * d;
    let (mut t0, mut t1, mut face) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for a in 0..3 {
        if db[a].abs() < 1e-15 {
            if ob[a].abs() > h[a] {
                return None;
            }
            continue;
        }
        let (mut n, mut f) = ((-h[a] - ob[a]) / db[a], (h[a] - ob[a]) / db[a]);
        let mut side = 0;
        if n > f {
            std::mem::swap(&mut n, &mut f);
            side = 1;
        }
        if n > t0 {
            t0 = n;
            face = 2 * a + side;
        }
        t1 = t1.min(f);
    }
    (t0 <= t1 && t0 > 1e-9).then_some((t0, face))
}

impl SyntheticScene {
    pub fn frame_count(&self) -> usize {
        self.trajectory.len()
    }

    fn radius(&self) -> f64 {
        self.spec.path.radius
    }

    fn heading(&self, k: usize) -> f64 {
        TAU * self.spec.path.laps * k as f64 / self.spec.frames as f64
    }

    /// First intersection along a unit ray at frame `k`.
    fn trace(&self, k: usize, o: &Vector3<f64>, d: &Vector3<f64>) -> (f64, Surface) {
        let c = &self.spec.corridor;
        let mut best = (f64::INFINITY, Surface::Sky);
        let mut consider = |t: Option<f64>, s: Surface| {
            if let Some(t) = t {
                if t < best.0 {
                    best = (t, s);
                }
            }
        };
        consider(cylinder_hit(o, d, &self.center, self.radius() - c.half_width), Surface::InnerWall);
        consider(cylinder_hit(o, d, &self.center, self.radius() + c.half_width), Surface::OuterWall);
        if d.y > 1e-12 {
            consider(Some((c.floor - o.y) / d.y), Surface::Floor);
        }
        for (b, body) in self.bodies.iter().enumerate() {
            let h = Vector3::from(body.spec.size) * 0.5;
            if let Some((t, face)) = box_hit(o, d, &body.poses[k], &h) {
                consider(Some(t), Surface::Body(b, face));
            }
        }
        best
    }

    fn shade(&self, surface: Surface, p: &Vector3<f64>) -> u8 {
        let cell = self.spec.corridor.texture_cell;
        let seed = self.seed;
        let wall = |id: u64, r: f64| {
            let theta = (p.z - self.center.z).atan2(p.x - self.center.x);
            let s = theta * r;
            let i = (s / cell).floor() as i64;
            let j = (p.y / cell).floor() as i64;
            let fine = cell_hash(seed, id, i, j) % 180;
            let coarse = cell_hash(seed, id + 10, i.div_euclid(6), 0) % 120;
            (30 + (fine * 3 + coarse * 2) / 5) as u8
        };
        match surface {
            Surface::InnerWall => wall(1, self.radius() - self.spec.corridor.half_width),
            Surface::OuterWall => wall(2, self.radius() + self.spec.corridor.half_width),
            Surface::Floor => {
                let i = (p.x / (2.0 * cell)).floor() as i64;
                let j = (p.z / (2.0 * cell)).floor() as i64;
                (70 + cell_hash(seed, 3, i, j) % 90) as u8
            }
            Surface::Body(b, face) => self.bodies[b].spec.shade.saturating_add(12 * face as u8),
            Surface::Sky => 215,
        }
    }

    /// Left image of frame `k`.
    pub fn render(&self, k: usize) -> GrayImage {
        let cam = &self.camera;
        let pose = self.trajectory[k].1;
        let o = *pose.translation();
        let r = *pose.rotation();
        let w = cam.width as usize;
        let mut buf = vec![0u8; w * cam.height as usize];
        buf.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
            let y = (v as f64 + 0.5 - cam.cy) / cam.fy;
            for (u, px) in row.iter_mut().enumerate() {
                let x = (u as f64 + 0.5 - cam.cx) / cam.fx;
                let d = (r * Vector3::new(x, y, 1.0)).normalize();
                let (t, s) = self.trace(k, &o, &d);
                *px = self.shade(s, &(o + t * d));
            }
        });
        GrayImage::from_raw(cam.width, cam.height, buf).expect("buffer sized to the image")
    }

    /// Pixel and disparity of a world point at frame `k` if it is in front
    /// of the camera, inside both images and not occluded.
    fn observe(&self, k: usize, pw: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let c = &self.spec.corridor;
        let twc = &self.trajectory[k].1;
        let pc = twc.inverse().transform_point(pw);
        if pc.z < c.min_depth || pc.z > c.max_depth {
            return None;
        }
        let px = self.camera.project(&pc)?;
        let d = self.camera.bf() / pc.z;
        let margin = 1.0;
        let (w, h) = (self.camera.width as f64 - margin, self.camera.height as f64 - margin);
        if px.x < margin || px.x > w || px.y < margin || px.y > h || px.x - d < margin {
            return None;
        }
        let o = twc.translation();
        let ray = pw - o;
        let dist = ray.norm();
        let (t, _) = self.trace(k, o, &(ray / dist));
        (t >= dist - 5e-3 - 1e-4 * dist).then_some((px, d))
    }

    fn observe_line(&self, k: usize, seg: &LineSegment3) -> Option<[(Vector2<f64>, f64); 2]> {
        let s = self.observe(k, &seg.start)?;
        let e = self.observe(k, &seg.end)?;
        self.observe(k, &(0.5 * (seg.start + seg.end)))?;
        ((e.0 - s.0).norm() >= 15.0).then_some([s, e])
    }

    /// Observations, labels and (if enabled) the rendered left image of frame `k`.
    pub fn frame(&self, k: usize) -> GeneratedFrame {
        self.frame_with(k, self.spec.render)
    }

    pub fn frame_with(&self, k: usize, render: bool) -> GeneratedFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64 + 1);
        let noise = Normal::new(0.0, self.spec.noise.sigma_px.max(0.0)).expect("finite sigma");
        let jitter = |rng: &mut ChaCha8Rng| if self.spec.noise.sigma_px > 0.0 { noise.sample(rng) } else { 0.0 };

        let mut pts: Vec<(FeatureId, Label, Vector2<f64>, f64)> = Vec::new();
        let mut lns: Vec<(FeatureId, Label, [(Vector2<f64>, f64); 2])> = Vec::new();
        for (b, body) in self.bodies.iter().enumerate() {
            let base = (b as FeatureId + 1) * BODY_ID_STRIDE;
            let pose = &body.poses[k];
            for (j, p) in body.points.iter().enumerate() {
                if let Some((px, d)) = self.observe(k, &pose.transform_point(p)) {
                    pts.push((base + j as FeatureId, Label::Dynamic, px, d));
                }
            }
            for (j, l) in body.lines.iter().enumerate() {
                if let Some(obs) = self.observe_line(k, &l.transform(pose)) {
                    lns.push((base + j as FeatureId, Label::Dynamic, obs));
                }
            }
        }
        pts.truncate(self.spec.points_per_frame);
        lns.truncate(self.spec.lines_per_frame);

        let mut ranked: Vec<(u32, usize, Vector2<f64>, f64)> = self
            .points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| self.observe(k, p).map(|(px, d)| (self.point_rank[i], i, px, d)))
            .collect();
        ranked.sort_by_key(|r| (r.0, r.1));
        let room = self.spec.points_per_frame - pts.len();
        let mut chosen: Vec<_> = ranked.into_iter().take(room).collect();
        chosen.sort_by_key(|r| r.1);
        let statics: Vec<_> = chosen.into_iter().map(|(_, i, px, d)| (i as FeatureId, Label::Static, px, d)).collect();
        pts.splice(0..0, statics);

        let mut ranked: Vec<(u32, usize, [(Vector2<f64>, f64); 2])> = self
            .lines
            .iter()
            .enumerate()
            .filter_map(|(i, l)| self.observe_line(k, l).map(|o| (self.line_rank[i], i, o)))
            .collect();
        ranked.sort_by_key(|r| (r.0, r.1));
        let room = self.spec.lines_per_frame - lns.len();
        let mut chosen: Vec<_> = ranked.into_iter().take(room).collect();
        chosen.sort_by_key(|r| r.1);
        let statics: Vec<_> = chosen.into_iter().map(|(_, i, o)| (i as FeatureId, Label::Static, o)).collect();
        lns.splice(0..0, statics);

        let mut frame = Frame::new(k, self.trajectory[k].0);
        let mut labels = FrameLabels::default();
        for (id, label, px, d) in pts {
            let u = quantize(px.x + jitter(&mut rng));
            let v = quantize(px.y + jitter(&mut rng));
            let ur = quantize(px.x - d + jitter(&mut rng));
            frame.points.push(if u - ur > 0.0 {
                PointFeature2D::stereo(id, u, v, u - ur)
            } else {
                PointFeature2D::mono(id, u, v)
            });
            labels.points.push((id, label));
        }
        for (id, label, [(s, ds), (e, de)]) in lns {
            let s2 = Vector2::new(quantize(s.x + jitter(&mut rng)), quantize(s.y + jitter(&mut rng)));
            let e2 = Vector2::new(quantize(e.x + jitter(&mut rng)), quantize(e.y + jitter(&mut rng)));
            let sr = quantize(s.x - ds + jitter(&mut rng));
            let er = quantize(e.x - de + jitter(&mut rng));
            let Ok(mut line) = LineFeature2D::new(id, s2, e2) else { continue };
            if s2.x - sr > 0.0 && e2.x - er > 0.0 {
                line = line.with_disparity(s2.x - sr, e2.x - er);
            }
            frame.lines.push(line);
            labels.lines.push((id, label));
        }
        self.inject_outliers(&mut rng, &mut frame, &mut labels);
        if render {
            frame.left = Some(self.render(k));
        }
        GeneratedFrame { frame, labels }
    }

    /// Replaces exactly `floor(rate * n)` of the frame's `n` observations by
    /// random ones, keeping their ids.
    fn inject_outliers(&self, rng: &mut ChaCha8Rng, frame: &mut Frame, labels: &mut FrameLabels) {
        let np = frame.points.len();
        let n = np + frame.lines.len();
        let m = (self.spec.noise.outlier_rate * n as f64).floor() as usize;
        if m == 0 {
            return;
        }
        let (w, h) = (self.camera.width as f64, self.camera.height as f64);
        let mut picks = sample(rng, n, m).into_vec();
        picks.sort_unstable();
        for i in picks {
            let u = quantize(rng.random_range(1.0..w - 1.0));
            let v = quantize(rng.random_range(1.0..h - 1.0));
            let d = quantize(rng.random_range(1.0..(u - 1.0).clamp(1.5, 80.0)));
            if i < np {
                let id = frame.points[i].id;
                frame.points[i] = PointFeature2D::stereo(id, u, v, d);
                labels.points[i].1 = Label::Outlier;
            } else {
                let j = i - np;
                let id = frame.lines[j].id;
                let angle = rng.random_range(0.0..TAU);
                let len = rng.random_range(20.0..120.0);
                let e = Vector2::new(
                    quantize((u + len * angle.cos()).clamp(1.0, w - 1.0)),
                    quantize((v + len * angle.sin()).clamp(1.0, h - 1.0)),
                );
                let s = Vector2::new(u, v);
                if let Ok(l) = LineFeature2D::new(id, s, e) {
                    frame.lines[j] = l.with_disparity(d, d);
                    labels.lines[j].1 = Label::Outlier;
                }
            }
        }
    }
}

fn body_samples(spec: &BodySpec, rng: &mut ChaCha8Rng) -> (Vec<Vector3<f64>>, Vec<LineSegment3>) {
    let h = Vector3::from(spec.size) * 0.5;
    // Faces: +-x sides, -y top (y is down), +-z ends.
    let faces: [(usize, f64); 5] = [(0, 1.0), (0, -1.0), (1, -1.0), (2, 1.0), (2, -1.0)];
    let on_face = |rng: &mut ChaCha8Rng, axis: usize, sign: f64| {
        let mut p = Vector3::zeros();
        for a in 0..3 {
            p[a] = if a == axis { sign * h[a] } else { rng.random_range(-h[a]..h[a]) };
        }
        p
    };
    let points = (0..spec.points)
        .map(|_| {
            let (axis, sign) = faces[rng.random_range(0..faces.len())];
            on_face(rng, axis, sign)
        })
        .collect();
    let lines = (0..spec.lines)
        .map(|_| {
            let (axis, sign) = faces[rng.random_range(0..faces.len())];
            let start = on_face(rng, axis, sign);
            let along = (axis + rng.random_range(1..3)) % 3;
            let mut end = start;
            let len = rng.random_range(0.3..0.8) * 2.0 * h[along];
            end[along] = if start[along] + len <= h[along] { start[along] + len } else { start[along] - len };
            LineSegment3::new(start, end)
        })
        .collect();
    (points, lines)
}

/// Builds the scene for `spec` and `seed`. Every frame must see at least
/// one landmark.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene, SceneError> {
    spec.validate()?;
    let cs = &spec.camera;
    let camera = StereoCamera::new(cs.fx, cs.fy, cs.cx, cs.cy, cs.baseline, cs.width, cs.height)?;
    let r0 = spec.path.radius;
    let center = Vector3::new(-r0, 0.0, 0.0);
    let c = &spec.corridor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let heading = |k: f64| TAU * spec.path.laps * k / spec.frames as f64;
    let trajectory: Vec<(f64, Pose)> = (0..spec.frames)
        .map(|k| {
            let phi = heading(k as f64);
            let r = r0 + spec.path.shift_per_lap * phi / TAU;
            let p = ring_point(&center, r, phi, 0.0);
            (k as f64 / spec.rate_hz, Pose::new(ring_rotation(phi), p))
        })
        .collect();

    let (r_in, r_out) = (r0 - c.half_width, r0 + c.half_width);
    let mut points = Vec::with_capacity(c.wall_points + c.floor_points);
    for _ in 0..c.wall_points {
        let r = if rng.random_bool(0.5) { r_in } else { r_out };
        points.push(ring_point(&center, r, rng.random_range(0.0..TAU), rng.random_range(c.top..c.floor)));
    }
    for _ in 0..c.floor_points {
        let r = rng.random_range(r_in..r_out);
        points.push(ring_point(&center, r, rng.random_range(0.0..TAU), c.floor));
    }
    let mut lines = Vec::with_capacity(c.wall_lines + c.floor_lines);
    for _ in 0..c.wall_lines {
        let r = if rng.random_bool(0.5) { r_in } else { r_out };
        let phi = rng.random_range(0.0..TAU);
        let y0 = rng.random_range(c.top..c.floor - 0.5);
        let y1 = (y0 + rng.random_range(0.5..2.0)).min(c.floor);
        lines.push(LineSegment3::new(ring_point(&center, r, phi, y0), ring_point(&center, r, phi, y1)));
    }
    while lines.len() < c.wall_lines + c.floor_lines {
        let s = ring_point(&center, rng.random_range(r_in..r_out), rng.random_range(0.0..TAU), c.floor);
        let a = rng.random_range(0.0..TAU);
        let e = s + rng.random_range(1.0..3.0) * Vector3::new(a.cos(), 0.0, a.sin());
        let re = ((e.x - center.x).powi(2) + (e.z - center.z).powi(2)).sqrt();
        if re > r_in && re < r_out {
            lines.push(LineSegment3::new(s, e));
        }
    }
    let point_rank = (0..points.len()).map(|_| rng.random()).collect();
    let line_rank = (0..lines.len()).map(|_| rng.random()).collect();

    let bodies = spec
        .bodies
        .iter()
        .map(|b| {
            let (bp, bl) = body_samples(b, &mut rng);
            let poses = (0..spec.frames)
                .map(|k| {
                    let psi = (b.lead + b.speed * r0 * heading(k as f64)) / r0;
                    let r = r0 + b.lateral + b.sway * (TAU * k as f64 / b.sway_period).sin();
                    Pose::new(ring_rotation(psi), ring_point(&center, r, psi, c.floor - 0.5 * b.size[1]))
                })
                .collect();
            Body {
                spec: b.clone(),
                points: bp,
                lines: bl,
                poses,
            }
        })
        .collect();

    let scene = SyntheticScene {
        spec: spec.clone(),
        seed,
        camera,
        trajectory,
        points,
        lines,
        bodies,
        point_rank,
        line_rank,
        center,
    };
    for k in 0..scene.frame_count() {
        let any_point = scene.points.iter().any(|p| scene.observe(k, p).is_some());
        let any_body = scene
            .bodies
            .iter()
            .any(|b| b.points.iter().any(|p| scene.observe(k, &b.poses[k].transform_point(p)).is_some()));
        if !any_point && !any_body {
            return Err(SceneError::NothingVisible(k));
        }
    }
    debug_assert!(scene.heading(0) == 0.0);
    Ok(scene)
}
