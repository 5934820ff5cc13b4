//! Absolute trajectory error after aligning the first poses.

use thiserror::Error;

use crate::geometry::Pose;

/// Timestamps closer than this are the same instant (TUM files keep 6 decimals).
pub const TIMESTAMP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectory lengths differ: {estimated} estimated vs {ground_truth} ground truth")]
    LengthMismatch { estimated: usize, ground_truth: usize },
    #[error("timestamps differ at row {index}: {estimated} vs {ground_truth}")]
    TimestampMismatch {
        index: usize,
        estimated: f64,
        ground_truth: f64,
    },
    #[error("empty trajectory")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameError {
    pub timestamp: f64,
    /// Position error (m).
    pub translation: f64,
    /// Rotation error (degrees).
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMetrics {
    pub ate_rmse: f64,
    pub rotation_rmse_deg: f64,
    /// One entry per frame after the alignment frame.
    pub per_frame: Vec<FrameError>,
}

/// Maps the estimate onto the ground truth through the first pose, then
/// reports RMS position and rotation errors over the remaining frames.
pub fn evaluate_trajectory(estimated: &[(f64, Pose)], ground_truth: &[(f64, Pose)]) -> Result<TrajectoryMetrics, EvalError> {
    if estimated.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch {
            estimated: estimated.len(),
            ground_truth: ground_truth.len(),
        });
    }
    if estimated.is_empty() {
        return Err(EvalError::Empty);
    }
    for (index, ((te, _), (tg, _))) in estimated.iter().zip(ground_truth).enumerate() {
        if (te - tg).abs() > TIMESTAMP_TOLERANCE {
            return Err(EvalError::TimestampMismatch {
                index,
                estimated: *te,
                ground_truth: *tg,
            });
        }
    }
    let align = ground_truth[0].1 * estimated[0].1.inverse();
    let per_frame: Vec<FrameError> = estimated
        .iter()
        .zip(ground_truth)
        .skip(1)
        .map(|((t, e), (_, g))| {
            let a = align * *e;
            FrameError {
                timestamp: *t,
                translation: (a.translation() - g.translation()).norm(),
                rotation: a.angle_to(g).to_degrees(),
            }
        })
        .collect();
    let rms = |f: &dyn Fn(&FrameError) -> f64| {
        if per_frame.is_empty() {
            0.0
        } else {
            (per_frame.iter().map(|e| f(e).powi(2)).sum::<f64>() / per_frame.len() as f64).sqrt()
        }
    };
    Ok(TrajectoryMetrics {
        ate_rmse: rms(&|e| e.translation),
        rotation_rmse_deg: rms(&|e| e.rotation),
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector3, Vector6};

    fn traj(n: usize) -> Vec<(f64, Pose)> {
        (0..n)
            .map(|k| (k as f64 * 0.1, Pose::exp(&Vector6::new(k as f64, 0.1, 0.3 * k as f64, 0.0, 0.05 * k as f64, 0.01))))
            .collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let t = traj(10);
        let m = evaluate_trajectory(&t, &t).unwrap();
        assert!(m.ate_rmse < 1e-12 && m.rotation_rmse_deg < 1e-6);
    }

    #[test]
    fn shift_after_alignment_frame() {
        let gt = vec![(0.0, Pose::identity()), (0.1, Pose::from_translation(Vector3::new(0.0, 0.0, 1.0)))];
        let mut est = gt.clone();
        est[1].1 = Pose::from_translation(Vector3::new(1.0, 0.0, 1.0));
        let m = evaluate_trajectory(&est, &gt).unwrap();
        assert!((m.ate_rmse - 1.0).abs() < 1e-12);
        assert_eq!(m.rotation_rmse_deg, 0.0);
    }

    #[test]
    fn global_offset_is_aligned_away() {
        let gt = traj(6);
        let g = Pose::exp(&Vector6::new(3.0, -1.0, 2.0, 0.2, -0.4, 0.1));
        let est: Vec<_> = gt.iter().map(|(t, p)| (*t, g * *p)).collect();
        assert!(evaluate_trajectory(&est, &gt).unwrap().ate_rmse < 1e-9);
    }

    #[test]
    fn mismatches_are_errors() {
        let gt = traj(4);
        assert!(matches!(evaluate_trajectory(&gt[..3], &gt), Err(EvalError::LengthMismatch { .. })));
        let mut est = gt.clone();
        est.swap(1, 2);
        assert!(matches!(
            evaluate_trajectory(&est, &gt),
            Err(EvalError::TimestampMismatch { index: 1, .. })
        ));
    }
}
