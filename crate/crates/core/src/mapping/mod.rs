//! Keyframes, landmarks, the covisibility graph and bundle adjustment.

mod ba;

pub use ba::{bundle_adjust, local_bundle_adjust, reprojection_rms, BaError, BaParams, BaReport};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::Vector2;

use crate::camera::StereoCamera;
use crate::features::{FeatureId, Frame, Landmark3D};
use crate::geometry::Pose;
use crate::ggs::GgsDescriptor;

pub type KeyframeId = usize;
/// Internal landmark identity. A feature id that reappears after leaving the
/// recent keyframes starts a new landmark, so one feature id can map to
/// several landmarks over a run.
pub type LandmarkId = u64;

/// Point and line ids live in separate namespaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LandmarkKey {
    Point(FeatureId),
    Line(FeatureId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    Point(Vector2<f64>),
    Line { start: Vector2<f64>, end: Vector2<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfObservation {
    pub key: LandmarkKey,
    pub observation: Observation,
}

#[derive(Debug, Clone)]
pub struct KeyFrame {
    pub id: KeyframeId,
    pub frame_index: usize,
    pub timestamp: f64,
    /// World-from-camera.
    pub pose: Pose,
    pub observations: BTreeMap<LandmarkId, KfObservation>,
    pub ggs: Option<GgsDescriptor>,
}

impl KeyFrame {
    /// Observations indexed by feature key, for id-based matching.
    pub fn by_feature(&self) -> BTreeMap<LandmarkKey, (LandmarkId, Observation)> {
        self.observations
            .iter()
            .map(|(&lid, o)| (o.key, (lid, o.observation)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapLandmark {
    pub key: LandmarkKey,
    /// World coordinates.
    pub geometry: Landmark3D,
    /// Keyframe that created it.
    pub anchor: KeyframeId,
    pub observers: BTreeSet<KeyframeId>,
}

/// Keyframe graph whose edges join keyframes sharing at least `min_shared`
/// landmarks, weighted by the shared count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovisibilityGraph {
    pub min_shared: usize,
    edges: BTreeMap<KeyframeId, BTreeMap<KeyframeId, usize>>,
}

impl CovisibilityGraph {
    pub fn new(min_shared: usize) -> Self {
        Self {
            min_shared,
            edges: BTreeMap::new(),
        }
    }

    pub fn weight(&self, a: KeyframeId, b: KeyframeId) -> Option<usize> {
        self.edges.get(&a).and_then(|m| m.get(&b)).copied()
    }

    pub fn neighbors(&self, kf: KeyframeId) -> impl Iterator<Item = (KeyframeId, usize)> + '_ {
        self.edges.get(&kf).into_iter().flat_map(|m| m.iter().map(|(&k, &w)| (k, w)))
    }

    pub fn edges(&self) -> impl Iterator<Item = (KeyframeId, KeyframeId, usize)> + '_ {
        self.edges
            .iter()
            .flat_map(|(&a, m)| m.iter().filter(move |(&b, _)| a < b).map(move |(&b, &w)| (a, b, w)))
    }

    fn set(&mut self, a: KeyframeId, b: KeyframeId, shared: usize) {
        if shared >= self.min_shared {
            self.edges.entry(a).or_default().insert(b, shared);
            self.edges.entry(b).or_default().insert(a, shared);
        } else {
            if let Some(m) = self.edges.get_mut(&a) {
                m.remove(&b);
            }
            if let Some(m) = self.edges.get_mut(&b) {
                m.remove(&a);
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LocalMap {
    pub keyframes: BTreeMap<KeyframeId, KeyFrame>,
    pub landmarks: BTreeMap<LandmarkId, MapLandmark>,
    pub covisibility: CovisibilityGraph,
    /// A feature re-associates to its landmark only if one of this many most
    /// recent keyframes observed it.
    pub reassociate_window: usize,
    active: BTreeMap<LandmarkKey, LandmarkId>,
    next_landmark: LandmarkId,
}

impl LocalMap {
    pub fn new(covis_min: usize) -> Self {
        Self {
            keyframes: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            covisibility: CovisibilityGraph::new(covis_min),
            reassociate_window: 5,
            active: BTreeMap::new(),
            next_landmark: 0,
        }
    }

    /// Landmark currently tracked under `key`, if still recent.
    fn active_landmark(&self, key: LandmarkKey, newest: KeyframeId) -> Option<LandmarkId> {
        let lid = *self.active.get(&key)?;
        let last = *self.landmarks.get(&lid)?.observers.iter().next_back()?;
        (last + self.reassociate_window >= newest).then_some(lid)
    }

    fn add_landmark(&mut self, key: LandmarkKey, geometry: Landmark3D, anchor: KeyframeId) -> LandmarkId {
        let lid = self.next_landmark;
        self.next_landmark += 1;
        self.landmarks.insert(
            lid,
            MapLandmark {
                key,
                geometry,
                anchor,
                observers: BTreeSet::new(),
            },
        );
        self.active.insert(key, lid);
        lid
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn last_keyframe(&self) -> Option<&KeyFrame> {
        self.keyframes.values().next_back()
    }

    /// Adds `frame` (pose already set) as a keyframe. Features whose id
    /// names a landmark seen by a recent keyframe become observations of
    /// it; other stereo
    /// features are triangulated into landmarks anchored here. Features that
    /// are neither are ignored.
    pub fn insert_keyframe(&mut self, frame: &Frame, cam: &StereoCamera) -> KeyframeId {
        let id = self.keyframes.keys().next_back().map_or(0, |k| k + 1);
        let mut observations = BTreeMap::new();

        for p in &frame.points {
            let key = LandmarkKey::Point(p.id);
            let lid = match self.active_landmark(key, id) {
                Some(lid) => lid,
                None => {
                    let Ok(pc) = cam.triangulate_point(p) else { continue };
                    self.add_landmark(key, Landmark3D::Point(frame.pose.transform_point(&pc)), id)
                }
            };
            self.landmarks.get_mut(&lid).unwrap().observers.insert(id);
            observations.insert(
                lid,
                KfObservation {
                    key,
                    observation: Observation::Point(p.pixel()),
                },
            );
        }
        for l in &frame.lines {
            let key = LandmarkKey::Line(l.id);
            let lid = match self.active_landmark(key, id) {
                Some(lid) => lid,
                None => {
                    let Ok(seg) = cam.triangulate_stereo_line(l) else { continue };
                    self.add_landmark(key, Landmark3D::Line(seg.transform(&frame.pose)), id)
                }
            };
            self.landmarks.get_mut(&lid).unwrap().observers.insert(id);
            observations.insert(
                lid,
                KfObservation {
                    key,
                    observation: Observation::Line {
                        start: l.start,
                        end: l.end,
                    },
                },
            );
        }

        let mut shared: BTreeMap<KeyframeId, usize> = BTreeMap::new();
        for key in observations.keys() {
            for &o in &self.landmarks[key].observers {
                if o != id {
                    *shared.entry(o).or_default() += 1;
                }
            }
        }
        for (other, n) in shared {
            self.covisibility.set(id, other, n);
        }
        self.keyframes.insert(
            id,
            KeyFrame {
                id,
                frame_index: frame.index,
                timestamp: frame.timestamp,
                pose: frame.pose,
                observations,
                ggs: frame.ggs.clone(),
            },
        );
        id
    }

    /// Number of landmarks observed by both keyframes.
    pub fn shared_landmarks(&self, a: KeyframeId, b: KeyframeId) -> usize {
        match (self.keyframes.get(&a), self.keyframes.get(&b)) {
            (Some(ka), Some(kb)) => ka.observations.keys().filter(|k| kb.observations.contains_key(k)).count(),
            _ => 0,
        }
    }

    /// Rebuilds every covisibility edge from the observation lists.
    pub fn recount_covisibility(&mut self) {
        let ids: Vec<KeyframeId> = self.keyframes.keys().copied().collect();
        let mut graph = CovisibilityGraph::new(self.covisibility.min_shared);
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                graph.set(a, b, self.shared_landmarks(a, b));
            }
        }
        self.covisibility = graph;
    }

    /// Drops landmarks no keyframe observes. Returns how many were removed.
    pub fn cull_landmarks(&mut self) -> usize {
        let before = self.landmarks.len();
        self.landmarks.retain(|_, l| !l.observers.is_empty());
        let landmarks = &self.landmarks;
        self.active.retain(|_, lid| landmarks.contains_key(lid));
        before - self.landmarks.len()
    }

    /// Replaces keyframe poses and moves every landmark rigidly with the
    /// correction of its anchor keyframe.
    pub fn apply_pose_corrections(&mut self, corrected: &BTreeMap<KeyframeId, Pose>) {
        let mut deltas = BTreeMap::new();
        for (id, new_pose) in corrected {
            if let Some(kf) = self.keyframes.get_mut(id) {
                deltas.insert(*id, *new_pose * kf.pose.inverse());
                kf.pose = *new_pose;
            }
        }
        for lm in self.landmarks.values_mut() {
            if let Some(d) = deltas.get(&lm.anchor) {
                lm.geometry = lm.geometry.transform(d);
            }
        }
    }

    /// Text dump: `K id` with 12 row-major pose values, `P id x y z`,
    /// `L id x1 y1 z1 x2 y2 z2`.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        for kf in self.keyframes.values() {
            let _ = write!(out, "K {}", kf.id);
            for v in kf.pose.to_row_major_12() {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        for (id, lm) in &self.landmarks {
            match &lm.geometry {
                Landmark3D::Point(p) => {
                    let _ = writeln!(out, "P {id} {} {} {}", p.x, p.y, p.z);
                }
                Landmark3D::Line(s) => {
                    let _ = writeln!(
                        out,
                        "L {id} {} {} {} {} {} {}",
                        s.start.x, s.start.y, s.start.z, s.end.x, s.end.y, s.end.z
                    );
                }
            }
        }
        out
    }
}
