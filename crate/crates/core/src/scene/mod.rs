//! Synthetic worlds, LiDAR simulation, voxel ground truth and camera views.

mod camera;
mod grid;
mod lidar;
mod world;

pub use camera::{default_cameras, depth_shade, palette, render_views, Camera, Image, MIN_DEPTH};
pub use grid::GridSpec;
pub use lidar::{aggregate_sweeps, reflectivity, simulate_lidar, sweep_poses, LidarPattern, PointCloud, GOPC_MAGIC};
pub use world::{
    generate_scene, rasterize_ground_truth, Hit, Primitive, SceneRecipe, Shape, World, EMPTY_CLASS, GROUND_CLASS,
};
