use std::collections::BTreeMap;

use crate::features::{FeatureId, LineFeature2D, PointFeature2D};

/// 256-bit binary descriptor compared by Hamming distance.
pub type Descriptor = [u8; 32];

fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Search window for rectified stereo: same row within `max_row_offset`,
/// disparity in `[0, max_disparity]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoWindow {
    pub max_row_offset: f64,
    pub max_disparity: f64,
}

impl Default for StereoWindow {
    fn default() -> Self {
        Self {
            max_row_offset: 1.0,
            max_disparity: 96.0,
        }
    }
}

impl StereoWindow {
    fn admits(&self, ul: f64, vl: f64, ur: f64, vr: f64) -> bool {
        let d = ul - ur;
        (vl - vr).abs() <= self.max_row_offset && d >= 0.0 && d <= self.max_disparity
    }
}

pub enum StereoMatching<'a> {
    /// Ground-truth identities (feature files, synthetic sequences).
    ById,
    /// Nearest descriptor among window candidates, accepted below `max_distance`.
    ByDescriptor {
        left: &'a [Descriptor],
        right: &'a [Descriptor],
        max_distance: u32,
    },
}

/// Assigns disparities to `left` features from their right-image matches.
/// Features without a candidate in the window come back with no disparity.
pub fn match_stereo(
    left: &[PointFeature2D],
    right: &[PointFeature2D],
    window: &StereoWindow,
    mode: &StereoMatching<'_>,
) -> Vec<PointFeature2D> {
    match mode {
        StereoMatching::ById => {
            let by_id: BTreeMap<FeatureId, &PointFeature2D> = right.iter().map(|f| (f.id, f)).collect();
            left.iter()
                .map(|l| {
                    let disparity = by_id
                        .get(&l.id)
                        .filter(|r| window.admits(l.u, l.v, r.u, r.v))
                        .map(|r| l.u - r.u);
                    PointFeature2D { disparity, ..*l }
                })
                .collect()
        }
        StereoMatching::ByDescriptor {
            left: ld,
            right: rd,
            max_distance,
        } => left
            .iter()
            .zip(ld.iter())
            .map(|(l, dl)| {
                let best = right
                    .iter()
                    .zip(rd.iter())
                    .filter(|(r, _)| window.admits(l.u, l.v, r.u, r.v))
                    .map(|(r, dr)| (hamming(dl, dr), l.u - r.u))
                    .filter(|&(h, _)| h <= *max_distance)
                    .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                PointFeature2D {
                    disparity: best.map(|(_, d)| d),
                    ..*l
                }
            })
            .collect(),
    }
}

/// Endpoint-wise stereo association of lines by id. Both endpoints must
/// fall inside the window for the line to count as matched.
pub fn match_stereo_lines(
    left: &[LineFeature2D],
    right: &[LineFeature2D],
    window: &StereoWindow,
) -> Vec<LineFeature2D> {
    let by_id: BTreeMap<FeatureId, &LineFeature2D> = right.iter().map(|f| (f.id, f)).collect();
    left.iter()
        .map(|l| {
            let disparity = by_id
                .get(&l.id)
                .filter(|r| {
                    window.admits(l.start.x, l.start.y, r.start.x, r.start.y)
                        && window.admits(l.end.x, l.end.y, r.end.x, r.end.y)
                })
                .map(|r| [l.start.x - r.start.x, l.end.x - r.end.x]);
            LineFeature2D { disparity, ..*l }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::StereoCamera;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_disparity_field() {
        let left: Vec<_> = (0..20)
            .map(|i| PointFeature2D::mono(i, 100.0 + 10.0 * i as f64, 50.0 + i as f64))
            .collect();
        let right: Vec<_> = left
            .iter()
            .map(|f| PointFeature2D::mono(f.id, f.u - 5.0, f.v))
            .collect();
        let out = match_stereo(&left, &right, &StereoWindow::default(), &StereoMatching::ById);
        assert!(out.iter().all(|f| f.disparity == Some(5.0)));
    }

    #[test]
    fn candidate_outside_window_is_unmatched() {
        let left = [
            PointFeature2D::mono(1, 300.0, 50.0),
            PointFeature2D::mono(2, 300.0, 80.0),
            PointFeature2D::mono(3, 300.0, 90.0),
        ];
        let right = [
            PointFeature2D::mono(1, 300.0 - 120.0, 50.0), // beyond max disparity
            PointFeature2D::mono(2, 290.0, 83.0),          // row offset 3
            PointFeature2D::mono(3, 305.0, 90.0),          // negative disparity
        ];
        let out = match_stereo(&left, &right, &StereoWindow::default(), &StereoMatching::ById);
        assert!(out.iter().all(|f| f.disparity.is_none()));
    }

    #[test]
    fn descriptor_mode_picks_nearest_in_window() {
        let left = [PointFeature2D::mono(0, 200.0, 40.0)];
        let right = [
            PointFeature2D::mono(10, 190.0, 40.5),
            PointFeature2D::mono(11, 180.0, 40.0),
            PointFeature2D::mono(12, 195.0, 60.0),
        ];
        let mut d0 = [0u8; 32];
        d0[0] = 0b1111;
        let mut far = d0;
        far[1] = 0xff;
        let near = d0;
        let ld = [d0];
        let rd = [far, near, near];
        let out = match_stereo(
            &left,
            &right,
            &StereoWindow::default(),
            &StereoMatching::ByDescriptor {
                left: &ld,
                right: &rd,
                max_distance: 4,
            },
        );
        assert_eq!(out[0].disparity, Some(20.0));
    }

    #[test]
    fn disparities_match_projection_oracle() {
        let cam = StereoCamera::new(718.856, 718.856, 607.19, 185.21, 0.537, 1241, 376).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut left = vec![];
        let mut right = vec![];
        let mut truth = vec![];
        for id in 0..200u64 {
            let p = Vector3::new(
                rng.random_range(-8.0..8.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(5.0..40.0),
            );
            let Some(px) = cam.project(&p) else { continue };
            if !cam.contains(&px) {
                continue;
            }
            let d = cam.bf() / p.z;
            // Detector quantization of +-0.25 px on each view.
            let (nl, nr): (f64, f64) = (rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25));
            left.push(PointFeature2D::mono(id, px.x + nl, px.y));
            right.push(PointFeature2D::mono(id, px.x - d + nr, px.y));
            truth.push(d);
        }
        let out = match_stereo(&left, &right, &StereoWindow::default(), &StereoMatching::ById);
        for (f, d) in out.iter().zip(truth) {
            assert!((f.disparity.unwrap() - d).abs() <= 0.5);
        }
    }
}
