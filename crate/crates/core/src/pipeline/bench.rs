use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::run::net_seed;
use super::stages::{build_scene, clip_to_grid};
use crate::error::{Error, Result};
use crate::gaf::{OccNet, SceneInput};
use crate::geometry::normalize;
use crate::init::{init_gaussians, InitConfig};
use crate::rng::SeedTree;
use crate::splat::{splat_occupancy, GaussianSet};

/// One timed workload.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub op: String,
    pub n_gaussians: usize,
    /// Fastest of the repeats.
    pub wall_ms: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// High-water resident set size of this process, when the OS reports it.
    pub peak_rss_kb: Option<u64>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench report serializes") + "\n"
    }

    /// Timings of one operation in row order.
    pub fn series(&self, op: &str) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.op == op).map(|r| (r.n_gaussians, r.wall_ms)).collect()
    }
}

/// Peak resident memory from `/proc/self/status`.
pub fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// `n` Gaussians placed uniformly in the grid with scales from the
/// initialization range.
pub fn random_gaussians(cfg: &RunConfig, n: usize, seed: u64) -> GaussianSet {
    let mut rng = SeedTree::new(seed).child("bench").rng("gaussians");
    let (lo, hi) = (cfg.grid.origin, cfg.grid.max_corner());
    let (s0, s1) = cfg.init.scale_range;
    let c = cfg.num_classes();
    let mut g = GaussianSet::empty(c);
    for _ in 0..n {
        g.mu.push(std::array::from_fn(|a| rng.random_range(lo[a]..hi[a])));
        let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let axis = normalize([v[1], v[2], v[3]]);
        let half = v[0] * std::f64::consts::PI / 2.0;
        g.rot.push([half.cos(), axis[0] * half.sin(), axis[1] * half.sin(), axis[2] * half.sin()]);
        g.scale.push(std::array::from_fn(|_| rng.random_range(s0..=s1)));
        g.sem.extend((0..c).map(|_| rng.random_range(-1.0..1.0)));
    }
    g
}

fn time_min(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

/// Wall time of splatting and, optionally, of one fusion forward pass for
/// each Gaussian count.
pub fn bench(cfg: &RunConfig, counts: &[usize], repeats: usize, with_gaf: bool) -> Result<BenchReport> {
    if counts.is_empty() {
        return Err(Error::Config("bench needs at least one Gaussian count".into()));
    }
    let mut rows = Vec::new();
    for &n in counts {
        let g = random_gaussians(cfg, n, cfg.seed);
        let wall_ms = time_min(repeats, || splat_occupancy(&g, &cfg.grid, cfg.train.radius_multiplier).map(|_| ()))?;
        rows.push(BenchRow { op: "splat_occupancy".into(), n_gaussians: n, wall_ms, repeats });
    }
    if with_gaf {
        let sd = build_scene(cfg)?;
        let cloud = clip_to_grid(&sd.scan, cfg);
        let scene = SceneInput::new(&cloud.points, &cloud.intensity, &cfg.grid, sd.images, sd.cameras, &cfg.gaf)?;
        let net = OccNet::new(cfg.gaf.clone(), cfg.num_classes(), net_seed(cfg))?;
        for &n in counts {
            let init = InitConfig { num_gaussians: n, seed: cfg.seed, ..cfg.init.clone() };
            let g = init_gaussians(&cloud.points, &init, cfg.num_classes())?;
            let wall_ms = time_min(repeats, || net.refine(&scene, &g).map(|_| ()))?;
            rows.push(BenchRow { op: "gaf_forward".into(), n_gaussians: n, wall_ms, repeats });
        }
    }
    Ok(BenchReport { rows, peak_rss_kb: peak_rss_kb() })
}
