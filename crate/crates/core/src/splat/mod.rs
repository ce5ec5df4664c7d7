//! Semantic 3D Gaussians and their local splatting into voxel logits.

mod gaussian;
mod kernel;
mod occupancy;

pub use gaussian::{
    covariance, gaussian_contribution, quat_to_rot, renormalize_quaternions, Gaussian, GaussianSet, PARAM_LOG_SCALE,
    PARAM_MU, PARAM_ROT, PARAM_SEM, QUAT_EPS,
};
pub use kernel::{
    brute_force_occupancy, full_coverage_multiplier, splat_occupancy, splat_var, splat_with_stats, GaussianVars,
    SplatPlan, DEFAULT_RADIUS_MULTIPLIER, EMPTY_PRIOR,
};
pub use occupancy::{LabelGrid, LogitGrid, OccupancyGrid, GOCC_MAGIC};
