use std::collections::BTreeMap;

use nalgebra::Vector2;
use thiserror::Error;

use crate::features::{FeatureId, PointFeature2D};
use crate::grid::{GridCell, GridPartition};

/// A temporal point correspondence with its grid cross-values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMatch {
    pub prev: PointFeature2D,
    pub curr: PointFeature2D,
    pub grid_prev: GridCell,
    pub grid_curr: GridCell,
    /// Mean cross value against the peers in the previous frame (px^2).
    pub g_prev: f64,
    pub g_curr: f64,
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("grid cell holds a single matched point")]
pub struct SingletonGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointFilterParams {
    pub alpha: f64,
    /// Floor added to the rejection threshold (px^2).
    pub epsilon: f64,
    pub grid_cols: u32,
    pub grid_rows: u32,
    /// Peers used for matches alone in their grid cell.
    pub fallback_neighbors: usize,
}

impl Default for PointFilterParams {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            epsilon: 1.0,
            grid_cols: 64,
            grid_rows: 48,
            fallback_neighbors: 8,
        }
    }
}

/// Scalar 2-D cross product `a.x * b.y - a.y * b.x`.
pub fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Mean cross product of `target` with every peer.
pub fn grid_cross_value(target: &Vector2<f64>, peers: &[Vector2<f64>]) -> Result<f64, SingletonGrid> {
    if peers.is_empty() {
        return Err(SingletonGrid);
    }
    Ok(peers.iter().map(|p| cross2(target, p)).sum::<f64>() / peers.len() as f64)
}

/// Joins previous and current features by id; features outside `grid` are dropped.
pub fn match_points_by_id(
    prev: &[PointFeature2D],
    curr: &[PointFeature2D],
    grid: &GridPartition,
) -> Vec<PointMatch> {
    let by_id: BTreeMap<FeatureId, &PointFeature2D> = prev.iter().map(|f| (f.id, f)).collect();
    curr.iter()
        .filter_map(|c| {
            let p = by_id.get(&c.id)?;
            Some(PointMatch {
                prev: **p,
                curr: *c,
                grid_prev: grid.cell_of_point(p.u, p.v)?,
                grid_curr: grid.cell_of_point(c.u, c.v)?,
                g_prev: 0.0,
                g_curr: 0.0,
            })
        })
        .collect()
}

fn centroid(points: impl Iterator<Item = Vector2<f64>>) -> Vector2<f64> {
    let (sum, n) = points.fold((Vector2::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
    if n == 0 {
        sum
    } else {
        sum / n as f64
    }
}

/// Peer indices for every match: grid-mates in the previous frame when the
/// cell holds at least two matches, otherwise the nearest other matches
/// image-wide. The flag marks the image-wide fallback.
fn peer_sets(matches: &[PointMatch], k: usize) -> Vec<(Vec<usize>, bool)> {
    let mut cells: BTreeMap<GridCell, Vec<usize>> = BTreeMap::new();
    for (i, m) in matches.iter().enumerate() {
        cells.entry(m.grid_prev).or_default().push(i);
    }
    matches
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mates = &cells[&m.grid_prev];
            if mates.len() >= 2 {
                (mates.iter().copied().filter(|&j| j != i).collect(), false)
            } else {
                let mut others: Vec<(f64, FeatureId, usize)> = matches
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, o)| ((o.prev.pixel() - m.prev.pixel()).norm_squared(), o.prev.id, j))
                    .collect();
                let cmp = |a: &(f64, FeatureId, usize), b: &(f64, FeatureId, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if others.len() > k {
                    others.select_nth_unstable_by(k, cmp);
                    others.truncate(k);
                }
                others.sort_by(cmp);
                (others.into_iter().take(k).map(|(_, _, j)| j).collect(), true)
            }
        })
        .collect()
}

/// Grid cross-value mismatch filter.
///
/// Coordinates are taken relative to the centroid of all matched points in
/// each frame, which makes the cross values invariant to any global 2-D
/// rigid motion. A match is rejected when
/// `|g_prev - g_curr| > alpha * mean|g_prev - g_curr| + epsilon`, the mean
/// running over its grid cell, or over every match in the image when the
/// cell holds a single match. Returns `(inliers, outliers)` in input order
/// with the cross values filled in.
pub fn filter_point_matches(
    matches: &[PointMatch],
    params: &PointFilterParams,
) -> (Vec<PointMatch>, Vec<PointMatch>) {
    if matches.len() < 2 {
        return (matches.to_vec(), Vec::new());
    }
    let c_prev = centroid(matches.iter().map(|m| m.prev.pixel()));
    let c_curr = centroid(matches.iter().map(|m| m.curr.pixel()));
    let peers = peer_sets(matches, params.fallback_neighbors);

    let scored: Vec<PointMatch> = matches
        .iter()
        .zip(&peers)
        .map(|(m, (idx, _))| {
            let pp: Vec<_> = idx.iter().map(|&j| matches[j].prev.pixel() - c_prev).collect();
            let pc: Vec<_> = idx.iter().map(|&j| matches[j].curr.pixel() - c_curr).collect();
            PointMatch {
                g_prev: grid_cross_value(&(m.prev.pixel() - c_prev), &pp).unwrap_or(0.0),
                g_curr: grid_cross_value(&(m.curr.pixel() - c_curr), &pc).unwrap_or(0.0),
                ..*m
            }
        })
        .collect();

    let diff = |m: &PointMatch| (m.g_prev - m.g_curr).abs();
    let image_mean = scored.iter().map(diff).sum::<f64>() / scored.len() as f64;
    let mut cell_sum: BTreeMap<GridCell, (f64, usize)> = BTreeMap::new();
    for m in &scored {
        let e = cell_sum.entry(m.grid_prev).or_default();
        e.0 += diff(m);
        e.1 += 1;
    }

    let mut inliers = Vec::new();
    let mut outliers = Vec::new();
    for (m, (_, fallback)) in scored.into_iter().zip(&peers) {
        let mean = if *fallback {
            image_mean
        } else {
            let (s, n) = cell_sum[&m.grid_prev];
            s / n as f64
        };
        if diff(&m) <= params.alpha * mean + params.epsilon {
            inliers.push(m);
        } else {
            outliers.push(m);
        }
    }
    (inliers, outliers)
}
