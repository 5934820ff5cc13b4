//! The per-frame SLAM loop: association and mismatch filtering, dynamic
//! feature rejection, frame-to-frame tracking, keyframe selection, local
//! mapping, loop closure, and a final global bundle adjustment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use thiserror::Error;

use crate::association::{
    build_llgs, filter_line_matches, filter_point_matches, match_lines_by_id, match_points_by_id,
};
use crate::camera::StereoCamera;
use crate::config::RunConfig;
use crate::dynamics::{detect_dynamic_grids, detect_dynamic_llgs, MotionModel};
use crate::estimation::{estimate_pose, LineCorrespondence, PointCorrespondence};
use crate::features::{FeatureId, Frame};
use crate::geometry::Pose;
use crate::ggs::{compute_ggs_with, GgsError, KeyframeSelector};
use crate::grid::GridPartition;
use crate::io::{format_tum, write_text, IoError, SequenceKind, SequenceSource};
use crate::loopclosure::{correct_loop, global_bundle_adjust, verify_candidate, LoopDetector, LoopRejection};
use crate::mapping::{local_bundle_adjust, BaReport, KeyframeId, LocalMap};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Ggs(#[from] GgsError),
    #[error("sequence carries images only; features must be supplied as feature files")]
    NoFeatures,
    #[error("frame index {found} does not follow {previous}")]
    NonMonotone { previous: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeRecord {
    pub id: KeyframeId,
    pub frame: usize,
    pub timestamp: f64,
}

/// One verified loop candidate, accepted or not.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopEvent {
    pub current_kf: KeyframeId,
    pub looped_kf: KeyframeId,
    pub sim_v: f64,
    pub ratio_inl: Option<f64>,
    pub lc_rat: Option<f64>,
    pub accepted: bool,
    /// Rejection reason, or the correction failure for an accepted loop.
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Grid,
    Llg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsRecord {
    pub frame: usize,
    pub kind: GroupKind,
    /// Grid cell index or current-frame group index.
    pub group: usize,
    pub error: f64,
    pub flagged: bool,
}

/// Features of one frame treated as moving.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDynamics {
    /// False while no motion model exists or when disabled.
    pub evaluated: bool,
    pub points: BTreeSet<FeatureId>,
    pub lines: BTreeSet<FeatureId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub stage: &'static str,
    pub frame: usize,
    pub millis: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// World-from-camera for every frame, world = first camera.
    pub trajectory: Vec<(f64, Pose)>,
    pub keyframes: Vec<KeyframeRecord>,
    pub loops: Vec<LoopEvent>,
    pub dynamics: Vec<DynamicsRecord>,
    pub frame_dynamics: Vec<FrameDynamics>,
    pub timing: Vec<TimingRecord>,
    /// Frames whose pose came from the motion model because tracking failed.
    pub tracking_lost: Vec<usize>,
    pub ba_reports: Vec<BaReport>,
    pub global_ba: Option<BaReport>,
    /// Non-fatal problems, one line each.
    pub diagnostics: Vec<String>,
    pub map: LocalMap,
    pub config_echo: String,
}

struct Previous {
    frame: Frame,
    reference: KeyframeId,
    /// Reference-keyframe-from-frame.
    relative: Pose,
}

pub struct Pipeline {
    config: RunConfig,
    cam: StereoCamera,
    partition: GridPartition,
    map: LocalMap,
    selector: KeyframeSelector,
    detector: LoopDetector,
    motion: Option<MotionModel>,
    prev: Option<Previous>,
    since_keyframe: usize,
    /// (timestamp, reference keyframe, reference-from-frame) per frame.
    frames: Vec<(f64, KeyframeId, Pose)>,
    out: PipelineOutput,
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Pipeline {
    pub fn new(config: RunConfig, cam: StereoCamera) -> Self {
        let mut map = LocalMap::new(config.covis_min);
        map.reassociate_window = config.reassociate_window;
        let max_gap = (config.kf_max_gap > 0).then_some(config.kf_max_gap);
        Self {
            partition: GridPartition::new(config.point_grid.cols, config.point_grid.rows, cam.width, cam.height),
            selector: KeyframeSelector::new(config.kf_coeff, config.kf_bootstrap, max_gap),
            detector: LoopDetector::new(),
            motion: None,
            prev: None,
            since_keyframe: 0,
            frames: Vec::new(),
            out: PipelineOutput {
                trajectory: Vec::new(),
                keyframes: Vec::new(),
                loops: Vec::new(),
                dynamics: Vec::new(),
                frame_dynamics: Vec::new(),
                timing: Vec::new(),
                tracking_lost: Vec::new(),
                ba_reports: Vec::new(),
                global_ba: None,
                diagnostics: Vec::new(),
                map: LocalMap::new(config.covis_min),
                config_echo: config.echo(),
            },
            map,
            config,
            cam,
        }
    }

    fn time(&mut self, stage: &'static str, frame: usize, start: Instant) {
        self.out.timing.push(TimingRecord {
            stage,
            frame,
            millis: millis(start),
        });
    }

    fn reference_pose(&self, kf: KeyframeId) -> Pose {
        self.map.keyframes[&kf].pose
    }

    /// Processes the next frame of the sequence.
    pub fn process(&mut self, mut frame: Frame) -> Result<(), PipelineError> {
        let k = frame.index;
        if let Some(p) = &self.prev {
            if k <= p.frame.index {
                return Err(PipelineError::NonMonotone {
                    previous: p.frame.index,
                    found: k,
                });
            }
        }
        let total = Instant::now();
        let t = Instant::now();
        if frame.ggs.is_none() {
            if let Some(img) = &frame.left {
                frame.ggs = Some(compute_ggs_with(img, &self.config.ggs())?);
            }
        }
        self.time("ggs", k, t);

        let Some(prev) = self.prev.take() else {
            frame.pose = Pose::identity();
            let kf = self.make_keyframe(&frame, &BTreeSet::new(), &BTreeSet::new())?;
            self.out.frame_dynamics.push(FrameDynamics::default());
            self.frames.push((frame.timestamp, kf, Pose::identity()));
            self.prev = Some(Previous {
                reference: kf,
                relative: Pose::identity(),
                frame,
            });
            self.time("total", k, total);
            return Ok(());
        };
        let prev_pose = self.reference_pose(prev.reference) * prev.relative;

        let t = Instant::now();
        let matches = match_points_by_id(&prev.frame.points, &frame.points, &self.partition);
        let (point_inliers, point_outliers) = filter_point_matches(&matches, &self.config.point_filter());
        let (line_inliers, line_outliers) = if self.config.use_lines {
            let line_matches = match_lines_by_id(&prev.frame.lines, &frame.lines);
            filter_line_matches(&line_matches, &build_llgs(&prev.frame.lines))
        } else {
            (Vec::new(), Vec::new())
        };
        self.time("association", k, t);

        let t = Instant::now();
        let mut dynamics = FrameDynamics::default();
        if let (true, Some(model)) = (self.config.use_dynamic, self.motion) {
            let dp = self.config.dynamics();
            let grids = detect_dynamic_grids(&point_inliers, &model, &self.cam, self.partition, dp.tau_pt);
            for (cell, err) in grids.mean_sq_error.iter().enumerate() {
                if let Some(error) = err {
                    self.out.dynamics.push(DynamicsRecord {
                        frame: k,
                        kind: GroupKind::Grid,
                        group: cell,
                        error: *error,
                        flagged: grids.mask[cell],
                    });
                }
            }
            dynamics.points = frame
                .points
                .iter()
                .filter(|p| grids.is_dynamic_pixel(p.u, p.v))
                .map(|p| p.id)
                .collect();
            if self.config.use_lines {
                let llgs = build_llgs(&frame.lines);
                let set = detect_dynamic_llgs(&line_inliers, &llgs, &model, &self.cam, dp.rho, dp.reduction);
                for (g, err) in set.errors.iter().enumerate() {
                    if let Some(error) = err {
                        self.out.dynamics.push(DynamicsRecord {
                            frame: k,
                            kind: GroupKind::Llg,
                            group: g,
                            error: *error,
                            flagged: set.flagged.contains(&g),
                        });
                    }
                }
                dynamics.lines = set.dynamic_lines;
            }
            dynamics.evaluated = true;
        }
        self.time("dynamics", k, t);

        let t = Instant::now();
        let points: Vec<PointCorrespondence> = point_inliers
            .iter()
            .filter(|m| !dynamics.points.contains(&m.curr.id))
            .filter_map(|m| {
                let landmark = self.cam.triangulate_point(&m.prev).ok()?;
                Some(PointCorrespondence {
                    id: m.curr.id,
                    landmark,
                    observation: m.curr.pixel(),
                })
            })
            .collect();
        let lines: Vec<LineCorrespondence> = line_inliers
            .iter()
            .filter(|m| !dynamics.lines.contains(&m.curr.id))
            .filter_map(|m| {
                let landmark = self.cam.triangulate_stereo_line(&m.prev).ok()?;
                Some(LineCorrespondence {
                    id: m.curr.id,
                    landmark,
                    observation: m.curr,
                })
            })
            .collect();
        let guess = self.motion.map_or(Pose::identity(), |m| m.t_pp);
        let mut rejected_points: BTreeSet<FeatureId> = point_outliers.iter().map(|m| m.curr.id).collect();
        let mut rejected_lines: BTreeSet<FeatureId> = line_outliers.iter().map(|m| m.curr.id).collect();
        let relative = match estimate_pose(&points, &lines, &guess, &self.cam, &self.config.estimation()) {
            Ok(est) => {
                for (c, ok) in points.iter().zip(&est.point_inliers) {
                    if !ok {
                        rejected_points.insert(c.id);
                    }
                }
                for (c, ok) in lines.iter().zip(&est.line_inliers) {
                    if !ok {
                        rejected_lines.insert(c.id);
                    }
                }
                est.pose
            }
            Err(e) => {
                self.out.tracking_lost.push(k);
                self.out.diagnostics.push(format!("frame {k}: {e}; using the motion model"));
                guess
            }
        };
        self.motion = Some(MotionModel::new(relative));
        frame.pose = prev_pose * relative.inverse();
        self.time("estimation", k, t);

        let is_keyframe = match &frame.ggs {
            Some(g) => self.selector.observe(g)?.is_keyframe,
            None => self.since_keyframe + 1 >= self.config.kf_max_gap.max(1),
        };
        let (reference, rel) = if is_keyframe {
            let skip_points: BTreeSet<FeatureId> = dynamics.points.union(&rejected_points).copied().collect();
            let skip_lines: BTreeSet<FeatureId> = dynamics.lines.union(&rejected_lines).copied().collect();
            let kf = self.make_keyframe(&frame, &skip_points, &skip_lines)?;
            (kf, Pose::identity())
        } else {
            self.since_keyframe += 1;
            (prev.reference, self.reference_pose(prev.reference).inverse() * frame.pose)
        };
        self.out.frame_dynamics.push(dynamics);
        self.frames.push((frame.timestamp, reference, rel));
        self.prev = Some(Previous {
            reference,
            relative: rel,
            frame,
        });
        self.time("total", k, total);
        Ok(())
    }

    /// Inserts `frame` (pose already set) without the excluded features,
    /// then runs local BA and loop closure.
    fn make_keyframe(
        &mut self,
        frame: &Frame,
        skip_points: &BTreeSet<FeatureId>,
        skip_lines: &BTreeSet<FeatureId>,
    ) -> Result<KeyframeId, PipelineError> {
        let k = frame.index;
        self.since_keyframe = 0;
        let t = Instant::now();
        let mut kf_frame = Frame::new(frame.index, frame.timestamp);
        kf_frame.pose = frame.pose;
        kf_frame.is_keyframe = true;
        kf_frame.ggs = frame.ggs.clone();
        kf_frame.points = frame.points.iter().filter(|p| !skip_points.contains(&p.id)).copied().collect();
        if self.config.use_lines {
            kf_frame.lines = frame.lines.iter().filter(|l| !skip_lines.contains(&l.id)).copied().collect();
        }
        let kf = self.map.insert_keyframe(&kf_frame, &self.cam);
        self.out.keyframes.push(KeyframeRecord {
            id: kf,
            frame: frame.index,
            timestamp: frame.timestamp,
        });
        if self.config.local_ba && self.map.len() >= 2 {
            match local_bundle_adjust(&mut self.map, kf, &self.cam, &self.config.ba()) {
                Ok(r) => self.out.ba_reports.push(r),
                Err(e) => self.out.diagnostics.push(format!("frame {k}: local BA skipped: {e}")),
            }
        }
        self.time("mapping", k, t);

        let t = Instant::now();
        if let Some(ggs) = &frame.ggs {
            if self.config.use_loop {
                self.close_loops(kf, ggs)?;
            }
            self.detector.add(kf, ggs.clone())?;
        }
        self.map.cull_landmarks();
        self.time("loop", k, t);
        Ok(kf)
    }

    fn close_loops(&mut self, kf: KeyframeId, ggs: &crate::ggs::GgsDescriptor) -> Result<(), PipelineError> {
        let params = self.config.loops();
        let candidates = self.detector.candidates(ggs, &params)?;
        for (looped, sim_v) in candidates.into_iter().take(params.max_candidates) {
            let v = verify_candidate(
                &self.map,
                &self.detector,
                kf,
                ggs,
                looped,
                sim_v,
                &self.cam,
                &params,
                &self.config.estimation(),
            );
            let mut event = LoopEvent {
                current_kf: kf,
                looped_kf: looped,
                sim_v,
                ratio_inl: v.candidate.map(|c| c.ratio_inl),
                lc_rat: v.candidate.map(|c| c.lc_rat),
                accepted: v.accepted(),
                note: v.rejection.map_or(String::new(), |r: LoopRejection| r.to_string()),
            };
            if let (true, Some(c)) = (v.accepted(), v.candidate) {
                match correct_loop(&mut self.map, &c, &params, &self.config.lm()) {
                    Ok(_) => {
                        self.out.loops.push(event);
                        return Ok(());
                    }
                    Err(e) => {
                        event.accepted = false;
                        event.note = format!("correction failed: {e}");
                        self.out.diagnostics.push(format!("keyframe {kf}: loop to {looped} discarded: {e}"));
                    }
                }
            }
            self.out.loops.push(event);
        }
        Ok(())
    }

    /// Runs global BA and assembles the trajectory.
    pub fn finish(mut self) -> PipelineOutput {
        let t = Instant::now();
        let last = self.frames.len().saturating_sub(1);
        if self.config.global_ba && self.map.len() >= 2 {
            match global_bundle_adjust(&mut self.map, &self.cam, &self.config.ba()) {
                Ok(r) => self.out.global_ba = Some(r),
                Err(e) => self.out.diagnostics.push(format!("global BA skipped: {e}")),
            }
        }
        self.time("global_ba", last, t);
        self.out.trajectory = self
            .frames
            .iter()
            .map(|(ts, kf, rel)| (*ts, self.map.keyframes[kf].pose * *rel))
            .collect();
        self.out.map = self.map;
        self.out
    }
}

/// Runs the whole sequence; frame `k + 1` is read while frame `k` is processed.
pub fn run_sequence(seq: &SequenceSource, config: &RunConfig) -> Result<PipelineOutput, PipelineError> {
    if seq.kind == SequenceKind::ImageDirectory {
        return Err(PipelineError::NoFeatures);
    }
    let mut pipeline = Pipeline::new(config.clone(), seq.camera);
    std::thread::scope(|s| {
        let (tx, rx) = sync_channel(1);
        s.spawn(move || {
            for i in 0..seq.len() {
                let r = seq.frame(i);
                let failed = r.is_err();
                if tx.send(r).is_err() || failed {
                    break;
                }
            }
        });
        for frame in rx {
            pipeline.process(frame?)?;
        }
        Ok::<_, PipelineError>(())
    })?;
    Ok(pipeline.finish())
}

impl PipelineOutput {
    pub fn trajectory_tum(&self) -> String {
        format_tum(&self.trajectory)
    }

    pub fn keyframes_csv(&self) -> String {
        let mut s = String::from("kf,frame,timestamp\n");
        for k in &self.keyframes {
            let _ = writeln!(s, "{},{},{}", k.id, k.frame, k.timestamp);
        }
        s
    }

    pub fn loops_csv(&self) -> String {
        let mut s = String::from("current_kf,looped_kf,sim_v,ratio_inl,lc_rat,accepted,note\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        for e in &self.loops {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.current_kf,
                e.looped_kf,
                e.sim_v,
                opt(e.ratio_inl),
                opt(e.lc_rat),
                e.accepted as u8,
                e.note.replace(',', ";")
            );
        }
        s
    }

    pub fn dynamics_csv(&self) -> String {
        let mut s = String::from("frame,kind,group,error,flagged\n");
        for d in &self.dynamics {
            let kind = match d.kind {
                GroupKind::Grid => "grid",
                GroupKind::Llg => "llg",
            };
            let _ = writeln!(s, "{},{kind},{},{},{}", d.frame, d.group, d.error, d.flagged as u8);
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("stage,frame,millis\n");
        for t in &self.timing {
            let _ = writeln!(s, "{},{},{:.3}", t.stage, t.frame, t.millis);
        }
        s
    }

    /// Writes every output file into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), IoError> {
        write_text(&dir.join("trajectory.txt"), &self.trajectory_tum())?;
        write_text(&dir.join("keyframes.csv"), &self.keyframes_csv())?;
        write_text(&dir.join("loops.csv"), &self.loops_csv())?;
        write_text(&dir.join("dynamics.csv"), &self.dynamics_csv())?;
        write_text(&dir.join("timing.csv"), &self.timing_csv())?;
        write_text(&dir.join("map.txt"), &self.map.to_dump())?;
        write_text(&dir.join("config.txt"), &self.config_echo)?;
        let mut diag = self.diagnostics.join("\n");
        if !diag.is_empty() {
            diag.push('\n');
        }
        write_text(&dir.join("diagnostics.txt"), &diag)
    }
}

/// Sorted (`kf`, `frame`) pairs, handy for tests.
pub fn keyframe_frames(out: &PipelineOutput) -> BTreeMap<KeyframeId, usize> {
    out.keyframes.iter().map(|k| (k.id, k.frame)).collect()
}
