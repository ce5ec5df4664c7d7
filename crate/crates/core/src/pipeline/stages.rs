use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::init::init_gaussians;
use crate::lcd::{reverse_sample, train_denoiser, Denoiser, MlpDenoiser, NoiseSchedule, SamplerConfig, TrainingPair};
use crate::rng::SeedTree;
use crate::scene::{
    aggregate_sweeps, default_cameras, generate_scene, rasterize_ground_truth, render_views, simulate_lidar, sweep_poses, Camera,
    Image, PointCloud, World,
};
use crate::splat::{GaussianSet, LabelGrid};

/// Synthetic world with everything the sensors see of it.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub world: World,
    pub gt: LabelGrid,
    /// Sensor-frame sweeps in travel order.
    pub sweeps: Vec<PointCloud>,
    /// Keyframe scan `P` in the world frame.
    pub scan: PointCloud,
    /// Aggregated dense target `T` in the world frame.
    pub target: PointCloud,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
}

pub fn make_world(cfg: &RunConfig) -> Result<World> {
    generate_scene(cfg.seed, &cfg.scene, &cfg.grid)
}

pub fn scan_world(world: &World, cfg: &RunConfig) -> Result<Vec<PointCloud>> {
    let pattern = cfg.lidar.pattern();
    sweep_poses(cfg.lidar.sweeps, cfg.lidar.sweep_step, cfg.lidar.sensor_height).iter().map(|p| simulate_lidar(world, p, &pattern)).collect()
}

/// The middle sweep, which sits at the world origin.
pub fn keyframe(sweeps: &[PointCloud]) -> Result<PointCloud> {
    let k = sweeps.get(sweeps.len() / 2).ok_or_else(|| Error::Input("no sweeps".into()))?;
    Ok(k.to_world())
}

pub fn cameras(cfg: &RunConfig) -> Vec<Camera> {
    default_cameras([0.0, 0.0, cfg.cameras.height], cfg.cameras.size, cfg.cameras.pitch_deg)
}

/// Cameras and their rendered images of the configured world.
pub fn views(cfg: &RunConfig, world: &World) -> Result<(Vec<Camera>, Vec<Image>)> {
    let cameras = cameras(cfg);
    let max_stride = cfg.gaf.strides.last().copied().unwrap_or(1);
    let images = render_views(world, &cameras, max_stride)?;
    Ok((cameras, images))
}

pub fn build_scene(cfg: &RunConfig) -> Result<SceneData> {
    let world = make_world(cfg)?;
    let gt = rasterize_ground_truth(&world, &cfg.grid, cfg.num_classes());
    let sweeps = scan_world(&world, cfg)?;
    let scan = keyframe(&sweeps)?;
    if scan.is_empty() {
        return Err(Error::Input("the keyframe scan has no points".into()));
    }
    let target = aggregate_sweeps(&sweeps);
    let (cameras, images) = views(cfg, &world)?;
    Ok(SceneData { world, gt, sweeps, scan, target, cameras, images })
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::new(cfg.lcd.t, cfg.lcd.beta0, cfg.lcd.beta_t)
}

/// Fit the completion denoiser on one scan/target pair.
pub fn pretrain_lcd(cfg: &RunConfig, scan: &PointCloud, target: &PointCloud) -> Result<(MlpDenoiser, Vec<f64>)> {
    let pair = TrainingPair::new(&scan.points, &target.points)?;
    train_denoiser(&[pair], &cfg.lcd.train, &schedule(cfg)?, SeedTree::new(cfg.seed).child("lcd").seed_u64())
}

pub fn n_out(cfg: &RunConfig, scan_len: usize) -> usize {
    if cfg.lcd.n_out == 0 {
        4 * scan_len
    } else {
        cfg.lcd.n_out
    }
}

/// Densify `scan` (world frame). The result keeps the scan points when
/// configured and is expressed in the world frame.
pub fn complete(cfg: &RunConfig, denoiser: &dyn Denoiser, scan: &PointCloud, sample_seed: u64) -> Result<PointCloud> {
    let sampler = SamplerConfig { n_out: n_out(cfg, scan.len()).max(scan.len()), steps: cfg.lcd.steps, mode: cfg.lcd.mode, seed_noise: true };
    let mut rng = SeedTree::new(sample_seed).child("lcd").rng("sample");
    let generated = reverse_sample(denoiser, scan, &schedule(cfg)?, &sampler, &mut rng)?;
    let mut out = if cfg.lcd.keep_input { scan.clone() } else { PointCloud::new(Vec::new(), Vec::new(), scan.pose)? };
    out.points.extend(generated.points);
    out.intensity.extend(generated.intensity);
    Ok(out)
}

/// Points inside the grid, so initialization never places anchors outside
/// the predicted volume.
pub fn clip_to_grid(cloud: &PointCloud, cfg: &RunConfig) -> PointCloud {
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| cfg.grid.voxel_of(cloud.points[i]).is_some()).collect();
    PointCloud { points: keep.iter().map(|&i| cloud.points[i]).collect(), intensity: keep.iter().map(|&i| cloud.intensity[i]).collect(), pose: cloud.pose }
}

pub fn initialize(cfg: &RunConfig, cloud: &[Vec3]) -> Result<GaussianSet> {
    let init = crate::init::InitConfig { seed: SeedTree::new(cfg.seed).child("init").seed_u64() ^ cfg.init.seed, ..cfg.init.clone() };
    init_gaussians(cloud, &init, cfg.num_classes())
}
