//! Files on disk: calibration, per-frame feature files, label sidecars, TUM
//! trajectories, grayscale images, and whole sequences.
//!
//! A sequence directory holds `calib.txt` and any of `features/NNNNNN.feat`,
//! `image_0/` and `image_1/` (PNG or PGM), `labels/NNNNNN.labels`,
//! `groundtruth.txt` and `times.txt`. A `.toml` path is read as a synthetic
//! scene spec and generated in memory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::camera::{CameraError, StereoCamera};
use crate::features::{FeatureId, Frame, LineFeature2D, PointFeature2D};
use crate::geometry::Pose;
use crate::synth::{generate_scene, FrameLabels, Label, SceneError, SceneSpec, SyntheticScene};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing calibration file {}", .0.display())]
    MissingCalibration(PathBuf),
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}: frame index {found} does not follow {previous}", path.display())]
    NonMonotone { path: PathBuf, previous: usize, found: usize },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{}: image is {found:?}, calibration says {expected:?}", path.display())]
    ImageSize { path: PathBuf, expected: (u32, u32), found: (u32, u32) },
    #[error("{}: {source}", path.display())]
    Camera { path: PathBuf, source: CameraError },
    #[error("{}: {source}", path.display())]
    Scene { path: PathBuf, source: SceneError },
    #[error("{}: no frames found", .0.display())]
    Empty(PathBuf),
    #[error("frame {0} is out of range")]
    OutOfRange(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Non-empty lines with `#` comments stripped, numbered from 1.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, message: impl Into<String>) -> IoError {
        IoError::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn num(&self, s: &str, what: &str) -> Result<f64, IoError> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(format!("{what}: '{s}' is not a finite number")))
    }

    fn uint(&self, s: &str, what: &str) -> Result<u64, IoError> {
        s.parse::<u64>()
            .map_err(|_| self.err(format!("{what}: '{s}' is not a non-negative integer")))
    }
}

/// Calibration values; the image size is optional in the file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub size: Option<(u32, u32)>,
}

impl Calibration {
    pub fn from_camera(cam: &StereoCamera) -> Self {
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            baseline: cam.baseline,
            size: Some((cam.width, cam.height)),
        }
    }

    /// Camera with the stored size, else `fallback`, else twice the
    /// principal point.
    pub fn camera(&self, fallback: Option<(u32, u32)>) -> Result<StereoCamera, CameraError> {
        let (w, h) = self
            .size
            .or(fallback)
            .unwrap_or(((2.0 * self.cx).ceil() as u32, (2.0 * self.cy).ceil() as u32));
        StereoCamera::new(self.fx, self.fy, self.cx, self.cy, self.baseline, w, h)
    }
}

/// Five lines `fx`, `fy`, `cx`, `cy`, `baseline`, optionally followed by a
/// `width height` line.
pub fn parse_calibration(text: &str, path: &Path) -> Result<Calibration, IoError> {
    let lines: Vec<(usize, &str)> = content_lines(text).collect();
    let names = ["fx", "fy", "cx", "cy", "baseline"];
    let last = lines.last().map_or(0, |l| l.0);
    if lines.len() < 5 || lines.len() > 6 {
        return Err(LineCtx { path, line: last.max(1) }.err(format!(
            "expected 5 value lines (fx fy cx cy baseline) and an optional size line, found {}",
            lines.len()
        )));
    }
    let mut v = [0.0; 5];
    for (slot, ((line, l), name)) in v.iter_mut().zip(lines.iter().zip(names)) {
        let ctx = LineCtx { path, line: *line };
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 1 {
            return Err(ctx.err(format!("expected a single value for {name}, found {}", toks.len())));
        }
        *slot = ctx.num(toks[0], name)?;
    }
    let size = match lines.get(5) {
        None => None,
        Some(&(line, l)) => {
            let ctx = LineCtx { path, line };
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 2 {
                return Err(ctx.err("size line must be 'width height'"));
            }
            Some((ctx.uint(toks[0], "width")? as u32, ctx.uint(toks[1], "height")? as u32))
        }
    };
    Ok(Calibration {
        fx: v[0],
        fy: v[1],
        cx: v[2],
        cy: v[3],
        baseline: v[4],
        size,
    })
}

pub fn read_calibration(path: &Path) -> Result<Calibration, IoError> {
    if !path.is_file() {
        return Err(IoError::MissingCalibration(path.to_path_buf()));
    }
    parse_calibration(&read_text(path)?, path)
}

pub fn format_calibration(c: &Calibration) -> String {
    let mut s = format!("{}\n{}\n{}\n{}\n{}\n", c.fx, c.fy, c.cx, c.cy, c.baseline);
    if let Some((w, h)) = c.size {
        let _ = writeln!(s, "{w} {h}");
    }
    s
}

/// Reads the `frame <index> <timestamp>` header of a feature file.
fn parse_header(text: &str, path: &Path) -> Result<(usize, f64), IoError> {
    let Some((line, l)) = content_lines(text).next() else {
        return Err(LineCtx { path, line: 1 }.err("missing 'frame <index> <timestamp>' header"));
    };
    let ctx = LineCtx { path, line };
    let toks: Vec<&str> = l.split_whitespace().collect();
    if toks.first() != Some(&"frame") {
        return Err(ctx.err("first line must be 'frame <index> <timestamp>'"));
    }
    if toks.len() != 3 {
        return Err(ctx.err(format!("header needs 2 fields after 'frame', found {}", toks.len() - 1)));
    }
    Ok((ctx.uint(toks[1], "frame index")? as usize, ctx.num(toks[2], "timestamp")?))
}

/// Parses one feature file. `P id uL vL uR vR` gives a stereo point
/// (`uR = -1` when unmatched); `L id sxL syL exL eyL sxR syR exR eyR` a line
/// (`sxR = -1` when unmatched). Only horizontal right coordinates are kept,
/// as disparities.
pub fn parse_feature_file(text: &str, path: &Path) -> Result<Frame, IoError> {
    let (index, timestamp) = parse_header(text, path)?;
    let mut frame = Frame::new(index, timestamp);
    let (mut point_ids, mut line_ids) = (BTreeSet::new(), BTreeSet::new());
    for (line, l) in content_lines(text).skip(1) {
        let ctx = LineCtx { path, line };
        let toks: Vec<&str> = l.split_whitespace().collect();
        let expect = |n: usize, tag: &str| {
            if toks.len() - 1 != n {
                Err(ctx.err(format!("expected {n} fields after '{tag}', found {}", toks.len() - 1)))
            } else {
                Ok(())
            }
        };
        match toks[0] {
            "P" => {
                expect(5, "P")?;
                let id = ctx.uint(toks[1], "id")?;
                let v: Vec<f64> = toks[2..]
                    .iter()
                    .map(|t| ctx.num(t, "coordinate"))
                    .collect::<Result<_, _>>()?;
                if !point_ids.insert(id) {
                    return Err(ctx.err(format!("duplicate point id {id}")));
                }
                frame.points.push(if v[2] == -1.0 {
                    PointFeature2D::mono(id, v[0], v[1])
                } else {
                    PointFeature2D::stereo(id, v[0], v[1], v[0] - v[2])
                });
            }
            "L" => {
                expect(9, "L")?;
                let id = ctx.uint(toks[1], "id")?;
                let v: Vec<f64> = toks[2..]
                    .iter()
                    .map(|t| ctx.num(t, "coordinate"))
                    .collect::<Result<_, _>>()?;
                if !line_ids.insert(id) {
                    return Err(ctx.err(format!("duplicate line id {id}")));
                }
                let mut lf = LineFeature2D::new(id, Vector2::new(v[0], v[1]), Vector2::new(v[2], v[3]))
                    .map_err(|e| ctx.err(e.to_string()))?;
                if v[4] != -1.0 {
                    lf = lf.with_disparity(v[0] - v[4], v[2] - v[6]);
                }
                frame.lines.push(lf);
            }
            "frame" => return Err(ctx.err("repeated frame header")),
            other => return Err(ctx.err(format!("unknown record '{other}'"))),
        }
    }
    Ok(frame)
}

pub fn format_feature_file(frame: &Frame) -> String {
    let mut s = format!("frame {} {}\n", frame.index, frame.timestamp);
    for p in &frame.points {
        let ur = p.disparity.map_or(-1.0, |d| p.u - d);
        let _ = writeln!(s, "P {} {} {} {} {}", p.id, p.u, p.v, ur, p.v);
    }
    for l in &frame.lines {
        let (a, b) = (l.start, l.end);
        match l.disparity {
            Some([ds, de]) => {
                let _ = writeln!(
                    s,
                    "L {} {} {} {} {} {} {} {} {}",
                    l.id,
                    a.x,
                    a.y,
                    b.x,
                    b.y,
                    a.x - ds,
                    a.y,
                    b.x - de,
                    b.y
                );
            }
            None => {
                let _ = writeln!(s, "L {} {} {} {} {} -1 -1 -1 -1", l.id, a.x, a.y, b.x, b.y);
            }
        }
    }
    s
}

pub fn read_feature_file(path: &Path) -> Result<Frame, IoError> {
    parse_feature_file(&read_text(path)?, path)
}

/// `P id label` / `L id label` per observation.
pub fn parse_labels(text: &str, path: &Path) -> Result<FrameLabels, IoError> {
    let mut out = FrameLabels::default();
    for (line, l) in content_lines(text) {
        let ctx = LineCtx { path, line };
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(ctx.err(format!("expected 'P|L <id> <label>', found {} fields", toks.len())));
        }
        let id: FeatureId = ctx.uint(toks[1], "id")?;
        let label = Label::parse(toks[2]).ok_or_else(|| ctx.err(format!("unknown label '{}'", toks[2])))?;
        match toks[0] {
            "P" => out.points.push((id, label)),
            "L" => out.lines.push((id, label)),
            other => return Err(ctx.err(format!("unknown record '{other}'"))),
        }
    }
    Ok(out)
}

pub fn format_labels(labels: &FrameLabels) -> String {
    let mut s = String::new();
    for (id, l) in &labels.points {
        let _ = writeln!(s, "P {id} {}", l.as_str());
    }
    for (id, l) in &labels.lines {
        let _ = writeln!(s, "L {id} {}", l.as_str());
    }
    s
}

/// TUM lines `timestamp tx ty tz qx qy qz qw`.
pub fn format_tum(traj: &[(f64, Pose)]) -> String {
    let mut s = String::new();
    for (t, p) in traj {
        let tr = p.translation();
        let q = p.quaternion();
        let _ = writeln!(
            s,
            "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w
        );
    }
    s
}

pub fn parse_tum(text: &str, path: &Path) -> Result<Vec<(f64, Pose)>, IoError> {
    content_lines(text)
        .map(|(line, l)| {
            let ctx = LineCtx { path, line };
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 8 {
                return Err(ctx.err(format!("expected 8 fields (t tx ty tz qx qy qz qw), found {}", toks.len())));
            }
            let v: Vec<f64> = toks.iter().map(|t| ctx.num(t, "value")).collect::<Result<_, _>>()?;
            let q = Quaternion::new(v[7], v[4], v[5], v[6]);
            if q.norm() < 1e-9 {
                return Err(ctx.err("zero quaternion"));
            }
            Ok((
                v[0],
                Pose::from_quaternion(&UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3])),
            ))
        })
        .collect()
}

pub fn read_tum(path: &Path) -> Result<Vec<(f64, Pose)>, IoError> {
    parse_tum(&read_text(path)?, path)
}

pub fn read_gray(path: &Path) -> Result<GrayImage, IoError> {
    image::open(path)
        .map(|i| i.into_luma8())
        .map_err(|source| IoError::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.save(path).map_err(|source| IoError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn frame_name(index: usize, ext: &str) -> String {
    format!("{index:06}.{ext}")
}

/// Finds `dir/NNNNNN.png` or `.pgm`.
fn find_image(dir: &Path, index: usize) -> Option<PathBuf> {
    ["png", "pgm"].iter().map(|e| dir.join(frame_name(index, e))).find(|p| p.is_file())
}

fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, IoError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)))
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    ImageDirectory,
    FeatureFiles,
    Synthetic,
}

#[derive(Debug, Clone)]
struct FrameFiles {
    index: usize,
    timestamp: f64,
    features: Option<PathBuf>,
    left: Option<PathBuf>,
    right: Option<PathBuf>,
    labels: Option<PathBuf>,
}

#[derive(Debug, Clone)]
enum Store {
    Files(Vec<FrameFiles>),
    Synthetic(Box<SyntheticScene>),
}

/// Frames in strictly increasing index order with one calibration.
#[derive(Debug, Clone)]
pub struct SequenceSource {
    pub kind: SequenceKind,
    pub camera: StereoCamera,
    pub ground_truth: Option<Vec<(f64, Pose)>>,
    pub load_images: bool,
    store: Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Seed for synthetic scenes.
    pub seed: u64,
    /// Decode images; feature-only runs can skip them.
    pub load_images: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            load_images: true,
        }
    }
}

impl SequenceSource {
    pub fn from_scene(scene: SyntheticScene, load_images: bool) -> Self {
        Self {
            kind: SequenceKind::Synthetic,
            camera: scene.camera,
            ground_truth: Some(scene.trajectory.clone()),
            load_images,
            store: Store::Synthetic(Box::new(scene)),
        }
    }

    pub fn len(&self) -> usize {
        match &self.store {
            Store::Files(f) => f.len(),
            Store::Synthetic(s) => s.frame_count(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scene(&self) -> Option<&SyntheticScene> {
        match &self.store {
            Store::Synthetic(s) => Some(s),
            Store::Files(_) => None,
        }
    }

    /// Reads the `i`-th frame.
    pub fn frame(&self, i: usize) -> Result<Frame, IoError> {
        match &self.store {
            Store::Synthetic(s) => {
                if i >= s.frame_count() {
                    return Err(IoError::OutOfRange(i));
                }
                Ok(s.frame_with(i, self.load_images && s.spec.render).frame)
            }
            Store::Files(files) => {
                let f = files.get(i).ok_or(IoError::OutOfRange(i))?;
                let mut frame = match &f.features {
                    Some(p) => read_feature_file(p)?,
                    None => Frame::new(f.index, f.timestamp),
                };
                if self.load_images {
                    let size = (self.camera.width, self.camera.height);
                    for (path, slot) in [(&f.left, &mut frame.left), (&f.right, &mut frame.right)] {
                        if let Some(p) = path {
                            let img = read_gray(p)?;
                            if img.dimensions() != size {
                                return Err(IoError::ImageSize {
                                    path: p.clone(),
                                    expected: size,
                                    found: img.dimensions(),
                                });
                            }
                            *slot = Some(img);
                        }
                    }
                }
                Ok(frame)
            }
        }
    }

    /// Ground-truth labels of frame `i`, when the sequence carries them.
    pub fn labels(&self, i: usize) -> Result<Option<FrameLabels>, IoError> {
        match &self.store {
            Store::Synthetic(s) => Ok((i < s.frame_count()).then(|| s.frame_with(i, false).labels)),
            Store::Files(files) => match files.get(i).and_then(|f| f.labels.as_ref()) {
                Some(p) => parse_labels(&read_text(p)?, p).map(Some),
                None => Ok(None),
            },
        }
    }
}

/// Opens a sequence directory or generates a synthetic scene from a `.toml`.
pub fn load_sequence(path: &Path, opts: &LoadOptions) -> Result<SequenceSource, IoError> {
    if path.is_file() && path.extension().is_some_and(|e| e == "toml") {
        let spec = SceneSpec::from_toml(&read_text(path)?).map_err(|source| IoError::Scene {
            path: path.to_path_buf(),
            source,
        })?;
        let scene = generate_scene(&spec, opts.seed).map_err(|source| IoError::Scene {
            path: path.to_path_buf(),
            source,
        })?;
        return Ok(SequenceSource::from_scene(scene, opts.load_images));
    }
    if !path.is_dir() {
        return Err(IoError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such sequence directory"),
        });
    }
    let calib = read_calibration(&path.join("calib.txt"))?;
    let (feat_dir, left_dir, right_dir) = (path.join("features"), path.join("image_0"), path.join("image_1"));

    let mut files = Vec::new();
    let kind = if feat_dir.is_dir() {
        let mut previous: Option<usize> = None;
        for p in list_files(&feat_dir, &["feat"])? {
            let (index, timestamp) = parse_header(&read_text(&p)?, &p)?;
            if let Some(prev) = previous.filter(|&prev| index <= prev) {
                return Err(IoError::NonMonotone {
                    path: p,
                    previous: prev,
                    found: index,
                });
            }
            previous = Some(index);
            files.push(FrameFiles {
                index,
                timestamp,
                features: Some(p),
                left: find_image(&left_dir, index),
                right: find_image(&right_dir, index),
                labels: Some(path.join("labels").join(frame_name(index, "labels"))).filter(|p| p.is_file()),
            });
        }
        SequenceKind::FeatureFiles
    } else if left_dir.is_dir() {
        let times = match path.join("times.txt") {
            t if t.is_file() => {
                let text = read_text(&t)?;
                content_lines(&text)
                    .map(|(line, l)| LineCtx { path: &t, line }.num(l, "timestamp"))
                    .collect::<Result<Vec<f64>, _>>()?
            }
            _ => Vec::new(),
        };
        for (i, p) in list_files(&left_dir, &["png", "pgm"])?.into_iter().enumerate() {
            let index = p
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<usize>().ok())
                .unwrap_or(i);
            files.push(FrameFiles {
                index,
                timestamp: times.get(i).copied().unwrap_or(index as f64),
                features: None,
                right: find_image(&right_dir, index),
                left: Some(p),
                labels: None,
            });
        }
        SequenceKind::ImageDirectory
    } else {
        return Err(IoError::Empty(path.to_path_buf()));
    };
    if files.is_empty() {
        return Err(IoError::Empty(path.to_path_buf()));
    }
    let image_size = match files.iter().find_map(|f| f.left.as_ref()) {
        Some(p) => Some(image::image_dimensions(p).map_err(|source| IoError::Image {
            path: p.clone(),
            source,
        })?),
        None => None,
    };
    if let (Some(c), Some(i), Some(p)) = (calib.size, image_size, files.iter().find_map(|f| f.left.as_ref())) {
        if c != i {
            return Err(IoError::ImageSize {
                path: p.clone(),
                expected: c,
                found: i,
            });
        }
    }
    let camera = calib.camera(image_size).map_err(|source| IoError::Camera {
        path: path.join("calib.txt"),
        source,
    })?;
    let gt = path.join("groundtruth.txt");
    let ground_truth = if gt.is_file() { Some(read_tum(&gt)?) } else { None };
    Ok(SequenceSource {
        kind,
        camera,
        ground_truth,
        load_images: opts.load_images,
        store: Store::Files(files),
    })
}

/// Writes a generated scene as a feature-file sequence with labels, ground
/// truth and (when rendered) left images.
pub fn write_sequence(dir: &Path, scene: &SyntheticScene) -> Result<(), IoError> {
    write_text(
        &dir.join("calib.txt"),
        &format_calibration(&Calibration::from_camera(&scene.camera)),
    )?;
    write_text(&dir.join("groundtruth.txt"), &format_tum(&scene.trajectory))?;
    for k in 0..scene.frame_count() {
        let g = scene.frame(k);
        write_text(
            &dir.join("features").join(frame_name(k, "feat")),
            &format_feature_file(&g.frame),
        )?;
        write_text(&dir.join("labels").join(frame_name(k, "labels")), &format_labels(&g.labels))?;
        if let Some(img) = &g.frame.left {
            write_gray(&dir.join("image_0").join(frame_name(k, "png")), img)?;
        }
    }
    Ok(())
}
