use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::Vector2;

use crate::features::{FeatureId, LineFeature2D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineMatch {
    pub prev: LineFeature2D,
    pub curr: LineFeature2D,
    /// Unsigned orientation change in `[0, pi/2]`.
    pub angle_diff: f64,
    pub midpoint_dist: f64,
}

impl LineMatch {
    pub fn new(prev: LineFeature2D, curr: LineFeature2D) -> Self {
        let d = (prev.orientation() - curr.orientation()).abs().rem_euclid(PI);
        Self {
            prev,
            curr,
            angle_diff: d.min(PI - d),
            midpoint_dist: (prev.midpoint() - curr.midpoint()).norm(),
        }
    }
}

/// Lines linked through chains of overlapping circular domains.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLineGroup {
    /// Sorted ascending.
    pub members: Vec<FeatureId>,
    /// `(center, diameter)` per member, in `members` order.
    pub domains: Vec<(Vector2<f64>, f64)>,
}

impl LocalLineGroup {
    pub fn contains(&self, id: FeatureId) -> bool {
        self.members.binary_search(&id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Domains centred on the midpoints with the segment lengths as diameters
/// overlap when the centres are closer than the sum of the radii.
pub fn circular_domains_overlap(a: &LineFeature2D, b: &LineFeature2D) -> bool {
    (a.midpoint() - b.midpoint()).norm() < (a.length() + b.length()) / 2.0
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the overlap relation. Groups are ordered by their
/// smallest member id, so the output does not depend on input order.
pub fn build_llgs(lines: &[LineFeature2D]) -> Vec<LocalLineGroup> {
    let mut order: Vec<usize> = (0..lines.len()).collect();
    order.sort_by_key(|&i| lines[i].id);
    let sorted: Vec<&LineFeature2D> = order.iter().map(|&i| &lines[i]).collect();

    let mut set = DisjointSet((0..sorted.len()).collect());
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            if circular_domains_overlap(sorted[i], sorted[j]) {
                set.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, LocalLineGroup> = BTreeMap::new();
    for (i, l) in sorted.iter().enumerate() {
        let g = groups.entry(set.find(i)).or_insert_with(|| LocalLineGroup {
            members: Vec::new(),
            domains: Vec::new(),
        });
        g.members.push(l.id);
        g.domains.push((l.midpoint(), l.length()));
    }
    groups.into_values().collect()
}

pub fn match_lines_by_id(prev: &[LineFeature2D], curr: &[LineFeature2D]) -> Vec<LineMatch> {
    let by_id: BTreeMap<FeatureId, &LineFeature2D> = prev.iter().map(|l| (l.id, l)).collect();
    curr.iter()
        .filter_map(|c| by_id.get(&c.id).map(|p| LineMatch::new(**p, *c)))
        .collect()
}

fn means<'a>(it: impl Iterator<Item = &'a LineMatch>) -> (f64, f64, usize) {
    let (a, d, n) = it.fold((0.0, 0.0, 0), |(a, d, n), m| (a + m.angle_diff, d + m.midpoint_dist, n + 1));
    if n == 0 {
        (0.0, 0.0, 0)
    } else {
        (a / n as f64, d / n as f64, n)
    }
}

/// Local line group mismatch filter. A match survives only if neither its
/// angle difference nor its midpoint distance exceeds twice the mean over the
/// matched members of its previous-frame group. Groups with fewer than two
/// matched members fall back to the image-wide means. Matches whose previous
/// line is in no group are judged against the image-wide means as well.
pub fn filter_line_matches(
    matches: &[LineMatch],
    llgs_prev: &[LocalLineGroup],
) -> (Vec<LineMatch>, Vec<LineMatch>) {
    let group_of: BTreeMap<FeatureId, usize> = llgs_prev
        .iter()
        .enumerate()
        .flat_map(|(g, llg)| llg.members.iter().map(move |&id| (id, g)))
        .collect();
    let mut grouped: BTreeMap<usize, Vec<&LineMatch>> = BTreeMap::new();
    for m in matches {
        if let Some(&g) = group_of.get(&m.prev.id) {
            grouped.entry(g).or_default().push(m);
        }
    }
    let global = means(matches.iter());
    let group_means: BTreeMap<usize, (f64, f64, usize)> = grouped
        .iter()
        .map(|(&g, ms)| (g, means(ms.iter().copied())))
        .collect();

    let mut inliers = Vec::new();
    let mut outliers = Vec::new();
    for m in matches {
        let (ma, md, _) = group_of
            .get(&m.prev.id)
            .map(|g| group_means[g])
            .filter(|&(_, _, n)| n >= 2)
            .unwrap_or(global);
        if m.angle_diff > 2.0 * ma || m.midpoint_dist > 2.0 * md {
            outliers.push(*m);
        } else {
            inliers.push(*m);
        }
    }
    (inliers, outliers)
}
