//! Stereo and temporal feature correspondence, plus the point and line
//! mismatch filters.

mod lines;
mod points;
mod stereo;

pub use lines::{
    build_llgs, circular_domains_overlap, filter_line_matches, match_lines_by_id, LineMatch,
    LocalLineGroup,
};
pub use points::{
    cross2, filter_point_matches, grid_cross_value, match_points_by_id, PointFilterParams,
    PointMatch, SingletonGrid,
};
pub use stereo::{match_stereo, match_stereo_lines, Descriptor, StereoMatching, StereoWindow};
