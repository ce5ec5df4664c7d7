use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::RunConfig;
use super::stages::{build_scene, clip_to_grid, complete, initialize, pretrain_lcd};
use super::train::{predict, train_joint, TrainLog};
use crate::error::{Error, Result, StageExt};
use crate::gaf::{OccNet, SceneInput};
use crate::lcd::chamfer;
use crate::objectives::MetricsReport;
use crate::rng::SeedTree;
use crate::splat::{GaussianSet, LabelGrid, OccupancyGrid};

/// File names inside the output directory.
pub mod artifacts {
    pub const SCAN: &str = "scan.gopc";
    pub const TARGET: &str = "target.gopc";
    pub const COMPLETED: &str = "completed.gopc";
    pub const GT: &str = "gt.gocc";
    pub const PRED: &str = "pred.gocc";
    pub const PRED_LOGITS: &str = "pred_logits.gocc";
    pub const DENOISER: &str = "denoiser.gowt";
    pub const GAUSSIANS_INIT: &str = "gaussians_init.gowt";
    pub const GAUSSIANS: &str = "gaussians.gowt";
    pub const NET: &str = "net.gowt";
    pub const REPORT: &str = "report.json";
    pub const CONFIG: &str = "config.txt";
}

/// What a full run produced, besides the files.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: MetricsReport,
    pub log: TrainLog,
    pub prediction: LabelGrid,
    pub gaussians: GaussianSet,
    pub out_dir: PathBuf,
}

/// Seed of the fusion network's initial weights.
pub fn net_seed(cfg: &RunConfig) -> u64 {
    SeedTree::new(cfg.seed).child("gaf").seed_u64()
}

fn write_grid(dir: &Path, name: &str, g: OccupancyGrid) -> Result<()> {
    g.write(&dir.join(name))
}

/// Scene generation, scanning, completion, initialization, joint training,
/// prediction and evaluation. Every artifact lands in `cfg.paths.out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    let start = Instant::now();
    cfg.validate().stage("config")?;
    let dir = PathBuf::from(&cfg.paths.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).stage("output")?;
    std::fs::write(dir.join(artifacts::CONFIG), cfg.canonical()).map_err(|e| Error::io(dir.join(artifacts::CONFIG), e)).stage("output")?;

    let sd = build_scene(cfg).stage("gen-scene")?;
    sd.scan.write(&dir.join(artifacts::SCAN)).stage("simulate-lidar")?;
    sd.target.write(&dir.join(artifacts::TARGET)).stage("aggregate")?;
    write_grid(&dir, artifacts::GT, OccupancyGrid::Labels(sd.gt.clone())).stage("gen-scene")?;

    let mut extra = std::collections::BTreeMap::new();
    extra.insert("scan_points".to_string(), sd.scan.len() as f64);
    extra.insert("chamfer_scan".to_string(), chamfer(&sd.scan.points, &sd.target.points));
    let cloud = if cfg.lcd.enabled {
        let (den, hist) = pretrain_lcd(cfg, &sd.scan, &sd.target).stage("lcd-pretrain")?;
        den.params.save(dir.join(artifacts::DENOISER)).stage("lcd-pretrain")?;
        extra.insert("lcd_loss_first".to_string(), hist.first().copied().unwrap_or(f64::NAN));
        extra.insert("lcd_loss_last".to_string(), hist.last().copied().unwrap_or(f64::NAN));
        let completed = complete(cfg, &den, &sd.scan, cfg.seed).stage("complete")?;
        completed.write(&dir.join(artifacts::COMPLETED)).stage("complete")?;
        extra.insert("chamfer_completed".to_string(), chamfer(&completed.points, &sd.target.points));
        extra.insert("completed_points".to_string(), completed.len() as f64);
        completed
    } else {
        sd.scan.clone()
    };
    let cloud = clip_to_grid(&cloud, cfg);
    let g0 = initialize(cfg, &cloud.points).stage("init-gaussians")?;
    g0.to_params().save(dir.join(artifacts::GAUSSIANS_INIT)).stage("init-gaussians")?;

    let scene = SceneInput::new(&cloud.points, &cloud.intensity, &cfg.grid, sd.images.clone(), sd.cameras.clone(), &cfg.gaf).stage("train")?;
    let mut net = OccNet::new(cfg.gaf.clone(), cfg.num_classes(), net_seed(cfg)).stage("train")?;
    let (_, before) = predict(&net, &g0, &scene, &cfg.grid, cfg.train.radius_multiplier).stage("predict")?;
    let before = MetricsReport::evaluate(&before.argmax(), &sd.gt, cfg.eval.miou_mode, String::new()).stage("eval")?;
    extra.insert("untrained_iou".to_string(), before.iou);
    extra.insert("untrained_miou".to_string(), before.miou);
    let (g1, log) = train_joint(&mut net, &g0, &scene, &sd.gt, &cfg.train).stage("train")?;
    net.params.save(dir.join(artifacts::NET)).stage("train")?;
    g1.to_params().save(dir.join(artifacts::GAUSSIANS)).stage("train")?;
    extra.insert("train_loss_first".to_string(), log.losses.first().copied().unwrap_or(f64::NAN));
    extra.insert("train_loss_final".to_string(), log.final_loss());

    let (refined, logits) = predict(&net, &g1, &scene, &cfg.grid, cfg.train.radius_multiplier).stage("predict")?;
    let labels = logits.argmax();
    write_grid(&dir, artifacts::PRED, OccupancyGrid::Labels(labels.clone())).stage("predict")?;
    write_grid(&dir, artifacts::PRED_LOGITS, OccupancyGrid::Logits(logits)).stage("predict")?;

    let mut report = MetricsReport::evaluate(&labels, &sd.gt, cfg.eval.miou_mode, cfg.hash()).stage("eval")?;
    report.extra = extra;
    report.wall_ms = start.elapsed().as_millis() as u64;
    let path = dir.join(artifacts::REPORT);
    std::fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e)).stage("eval")?;
    Ok(RunSummary { report, log, prediction: labels, gaussians: refined, out_dir: dir })
}
