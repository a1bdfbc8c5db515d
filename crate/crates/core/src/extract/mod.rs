//! Representations derived from a fitted field: the closest-direction
//! field and unsigned distance, surface point clouds, and point-set metrics.

mod metrics;
mod pointcloud;
mod vstar;

pub use metrics::{
    chamfer_f_score, chamfer_f_score_brute, nearest_brute, nearest_indexed, ChamferScores, GridIndex, DEFAULT_TAU,
};
pub use pointcloud::{read_xyz, sample_point_cloud, write_xyz, PointCloudConfig};
pub use vstar::{
    fit_vstar, load_vstar, save_vstar, udf_query, weighted_direction, UdfEstimate, VStarConfig, VStarLoss, VStarModel,
};
