//! Orchestration: configuration, stages, joint training and reports.

mod bench;
pub mod config;
mod run;
mod stages;
mod train;

pub use config::{CameraConfig, EvalConfig, LcdConfig, LidarConfig, PathConfig, RunConfig, TrainConfig};
pub use stages::{
    build_scene, cameras, clip_to_grid, complete, initialize, keyframe, make_world, n_out, pretrain_lcd, scan_world, schedule, views, SceneData,
};
pub use train::{evaluate_loss, predict, train_joint, TrainLog};
pub use run::{artifacts, net_seed, run_pipeline, RunSummary};
pub use bench::{bench, peak_rss_kb, random_gaussians, BenchReport, BenchRow};
