//! Scan-to-mesh evaluation: rigid alignment, exact surface distances, error
//! statistics and the landmark-consistency data filter.

pub mod align;
pub mod distance;
pub mod stats;

pub use align::{icp_point_to_plane, procrustes, rigid_align, AlignOptions, RigidTransform};
pub use distance::{
    brute_force_distance, point_triangle_distance, scan_to_mesh_distance, Bvh, Nearest,
};
pub use stats::{
    cumulative_curve, default_thresholds, error_stats, landmark_consistency_filter, DistanceReport,
    ErrorStats, FilterDecision, DEFAULT_FILTER_THRESHOLD,
};
