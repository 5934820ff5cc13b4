//! Global gray similarity (GGS): a two-scale grid of gray-level histograms per
//! frame, a min-over-scales L1 dissimilarity between frames, and the adaptive
//! keyframe rule built on it.

use std::fmt::Write as _;

use image::GrayImage;
use thiserror::Error;

use crate::grid::GridPartition;

pub const BINS: usize = 256;

pub type Histogram = [u32; BINS];

#[derive(Debug, Error, PartialEq)]
pub enum GgsError {
    #[error("image {width}x{height} is smaller than the {cols}x{rows} grid")]
    Undersized {
        width: u32,
        height: u32,
        cols: u32,
        rows: u32,
    },
    #[error("descriptors from different resolutions ({0}x{1} vs {2}x{3})")]
    ResolutionMismatch(u32, u32, u32, u32),
    #[error("scale factor {0} must lie in (0, 1]")]
    BadScale(f64),
    #[error("malformed descriptor dump at line {line}: {reason}")]
    Dump { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgsParams {
    pub scale: f64,
    pub cols: u32,
    pub rows: u32,
}

impl Default for GgsParams {
    fn default() -> Self {
        Self {
            scale: 0.8,
            cols: 4,
            rows: 3,
        }
    }
}

/// Histograms for the original image (level 0) followed by the scaled image
/// (level 1), each level laid out row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GgsDescriptor {
    hist: Vec<Histogram>,
    cells: usize,
    width: u32,
    height: u32,
    scaled_width: u32,
    scaled_height: u32,
}

impl GgsDescriptor {
    pub fn histogram(&self, level: usize, cell: usize) -> &Histogram {
        &self.hist[level * self.cells + cell]
    }

    pub fn histograms(&self) -> &[Histogram] {
        &self.hist
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// `M * N` of the original image.
    pub fn image_area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn scaled_area(&self) -> u64 {
        self.scaled_width as u64 * self.scaled_height as u64
    }

    pub fn resolution(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn level_total(&self, level: usize) -> u64 {
        self.hist[level * self.cells..(level + 1) * self.cells]
            .iter()
            .flat_map(|h| h.iter())
            .map(|&c| c as u64)
            .sum()
    }

    /// One line per histogram, 256 space-separated counts.
    pub fn to_dump(&self) -> String {
        let mut out = String::with_capacity(self.hist.len() * BINS * 4);
        for h in &self.hist {
            for (i, c) in h.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Parses the dump format back into histograms.
pub fn parse_dump(text: &str) -> Result<Vec<Histogram>, GgsError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let counts: Vec<u32> = line
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<Result<_, _>>()
                .map_err(|e| GgsError::Dump {
                    line: n + 1,
                    reason: format!("{e}"),
                })?;
            counts.try_into().map_err(|v: Vec<u32>| GgsError::Dump {
                line: n + 1,
                reason: format!("expected {BINS} counts, found {}", v.len()),
            })
        })
        .collect()
}

/// Per destination pixel, the overlapping source pixels and their overlap
/// measured in units of `1/dst` source pixels.
fn area_weights(src: u32, dst: u32) -> Vec<Vec<(u32, u64)>> {
    let (src, dst) = (src as u64, dst as u64);
    (0..dst)
        .map(|j| {
            // Destination pixel j covers [j*src, (j+1)*src) in units where a source pixel is `dst` long.
            let (lo, hi) = (j * src, (j + 1) * src);
            let first = lo / dst;
            let last = (hi - 1) / dst;
            (first..=last)
                .map(|i| {
                    let (a, b) = (i * dst, (i + 1) * dst);
                    (i as u32, hi.min(b) - lo.max(a))
                })
                .collect()
        })
        .collect()
}

/// Box-filter downscale to `dst_w x dst_h` using exact integer arithmetic;
/// each output is rounded half away from zero.
pub fn area_resize(img: &GrayImage, dst_w: u32, dst_h: u32) -> GrayImage {
    let (w, h) = img.dimensions();
    let wx = area_weights(w, dst_w);
    let wy = area_weights(h, dst_h);
    let raw = img.as_raw();

    // Horizontal pass: sums scaled by dst_w per source pixel width.
    let mut rows = vec![0u64; (dst_w * h) as usize];
    for y in 0..h as usize {
        let src_row = &raw[y * w as usize..(y + 1) * w as usize];
        let out = &mut rows[y * dst_w as usize..(y + 1) * dst_w as usize];
        for (o, weights) in out.iter_mut().zip(&wx) {
            *o = weights
                .iter()
                .map(|&(i, wt)| wt * src_row[i as usize] as u64)
                .sum();
        }
    }

    // Every output pixel integrates an area of w*h in these units.
    let denom = w as u64 * h as u64;
    let mut out = GrayImage::new(dst_w, dst_h);
    let buf: &mut [u8] = &mut out;
    for (j, weights) in wy.iter().enumerate() {
        for x in 0..dst_w as usize {
            let num: u64 = weights
                .iter()
                .map(|&(i, wt)| wt * rows[i as usize * dst_w as usize + x])
                .sum();
            let v = (2 * num + denom) / (2 * denom);
            buf[j * dst_w as usize + x] = v.min(255) as u8;
        }
    }
    out
}

/// Scaled size, `round(n * scale)` and at least one pixel.
pub fn scaled_size(n: u32, scale: f64) -> u32 {
    ((n as f64 * scale).round() as u32).max(1)
}

fn accumulate(img: &GrayImage, grid: &GridPartition, out: &mut [Histogram]) {
    let cols = grid.column_lut();
    let rows = grid.row_lut();
    let w = img.width() as usize;
    for (y, row) in img.as_raw().chunks_exact(w).enumerate() {
        let base = rows[y] * grid.cols;
        for (x, &px) in row.iter().enumerate() {
            out[(base + cols[x]) as usize][px as usize] += 1;
        }
    }
}

pub fn compute_ggs(img: &GrayImage) -> Result<GgsDescriptor, GgsError> {
    compute_ggs_with(img, &GgsParams::default())
}

pub fn compute_ggs_with(img: &GrayImage, params: &GgsParams) -> Result<GgsDescriptor, GgsError> {
    let (width, height) = img.dimensions();
    if width < params.cols || height < params.rows {
        return Err(GgsError::Undersized {
            width,
            height,
            cols: params.cols,
            rows: params.rows,
        });
    }
    if !(params.scale > 0.0 && params.scale <= 1.0) {
        return Err(GgsError::BadScale(params.scale));
    }
    let cells = (params.cols * params.rows) as usize;
    let (sw, sh) = (scaled_size(width, params.scale), scaled_size(height, params.scale));
    let mut hist = vec![[0u32; BINS]; 2 * cells];

    let (level0, level1) = hist.split_at_mut(cells);
    accumulate(img, &GridPartition::new(params.cols, params.rows, width, height), level0);
    let scaled = area_resize(img, sw, sh);
    accumulate(&scaled, &GridPartition::new(params.cols, params.rows, sw, sh), level1);

    Ok(GgsDescriptor {
        hist,
        cells,
        width,
        height,
        scaled_width: sw,
        scaled_height: sh,
    })
}

fn l1(a: &Histogram, b: &Histogram) -> u64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| x.abs_diff(y) as u64)
        .sum()
}

/// `sim_v`: for every grid cell the smallest L1 distance over the four
/// (level, level) pairings, summed and divided by the original image area.
/// Zero for identical descriptors; lower means more alike.
pub fn ggs_dissimilarity(a: &GgsDescriptor, b: &GgsDescriptor) -> Result<f64, GgsError> {
    if a.resolution() != b.resolution() || a.cells != b.cells {
        return Err(GgsError::ResolutionMismatch(a.width, a.height, b.width, b.height));
    }
    let total: u64 = (0..a.cells)
        .map(|i| {
            let mut best = u64::MAX;
            for p in 0..2 {
                for q in 0..2 {
                    best = best.min(l1(a.histogram(p, i), b.histogram(q, i)));
                }
            }
            best
        })
        .sum();
    Ok(total as f64 / a.image_area() as f64)
}

/// `GGS_th = GGS_pKF + coeff * (GGS_pKF+1 - GGS_ppKF+1)`.
pub fn keyframe_threshold(ggs_pkf: f64, ggs_pkf_next: f64, ggs_ppkf_next: f64, coeff: f64) -> f64 {
    ggs_pkf + coeff * (ggs_pkf_next - ggs_ppkf_next)
}

pub fn is_new_keyframe(current: f64, threshold: f64) -> bool {
    current > threshold
}

/// Keyframe decisions over a stream of frames.
///
/// The scalar GGS of a frame is its dissimilarity to the most recent keyframe.
/// `GGS_pKF` is the scalar with which the last keyframe was selected,
/// `GGS_pKF+1` the scalar of the first frame after it, and `GGS_ppKF+1` the
/// same quantity recorded after the keyframe before. Until those exist the
/// threshold is bootstrapped from the first post-keyframe step.
#[derive(Debug, Clone)]
pub struct KeyframeSelector {
    coeff: f64,
    bootstrap_multiple: f64,
    last_kf: Option<GgsDescriptor>,
    pkf: Option<f64>,
    pkf_next: Option<f64>,
    ppkf_next: Option<f64>,
    max_gap: Option<usize>,
    since_kf: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeDecision {
    pub is_keyframe: bool,
    /// Dissimilarity to the previous keyframe (0 for the first frame).
    pub scalar: f64,
    pub threshold: f64,
}

impl KeyframeSelector {
    /// `max_gap` forces a keyframe after that many frames without one.
    pub fn new(coeff: f64, bootstrap_multiple: f64, max_gap: Option<usize>) -> Self {
        Self {
            coeff,
            bootstrap_multiple,
            last_kf: None,
            pkf: None,
            pkf_next: None,
            ppkf_next: None,
            max_gap,
            since_kf: 0,
        }
    }

    pub fn last_keyframe(&self) -> Option<&GgsDescriptor> {
        self.last_kf.as_ref()
    }

    pub fn threshold(&self) -> Option<f64> {
        let next = self.pkf_next?;
        Some(match (self.pkf, self.ppkf_next) {
            (Some(pkf), Some(ppkf_next)) => keyframe_threshold(pkf, next, ppkf_next, self.coeff),
            (Some(pkf), None) => pkf,
            (None, _) => self.bootstrap_multiple * next,
        })
    }

    pub fn observe(&mut self, ggs: &GgsDescriptor) -> Result<KeyframeDecision, GgsError> {
        let Some(last) = &self.last_kf else {
            self.last_kf = Some(ggs.clone());
            return Ok(KeyframeDecision {
                is_keyframe: true,
                scalar: 0.0,
                threshold: 0.0,
            });
        };
        let scalar = ggs_dissimilarity(ggs, last)?;
        if self.pkf_next.is_none() {
            self.pkf_next = Some(scalar);
        }
        self.since_kf += 1;
        let threshold = self.threshold().unwrap_or(f64::INFINITY);
        let forced = self.max_gap.is_some_and(|g| self.since_kf >= g);
        let is_keyframe = is_new_keyframe(scalar, threshold) || forced;
        if is_keyframe {
            self.since_kf = 0;
            self.ppkf_next = self.pkf_next.take();
            self.pkf = Some(scalar);
            self.last_kf = Some(ggs.clone());
        }
        Ok(KeyframeDecision {
            is_keyframe,
            scalar,
            threshold,
        })
    }
}
