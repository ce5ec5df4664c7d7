use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use occfuse::autodiff::ParamSet;
use occfuse::gaf::{OccNet, SceneInput};
use occfuse::gradsuite;
use occfuse::lcd::{reverse_sample, MlpDenoiser, OracleDenoiser, SamplerConfig};
use occfuse::objectives::MetricsReport;
use occfuse::pipeline::{self, RunConfig};
use occfuse::rng::SeedTree;
use occfuse::scene::{rasterize_ground_truth, PointCloud};
use occfuse::splat::{GaussianSet, OccupancyGrid};
use occfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "occfuse", version, about = "Semantic occupancy from LiDAR and cameras with 3D Gaussians")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set gaf.M=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write its ground-truth grid.
    GenScene {
        #[arg(long)]
        gt: PathBuf,
    },
    /// Scan the world and write the keyframe scan and the aggregated target.
    SimulateLidar {
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Also write every sensor-frame sweep here.
        #[arg(long)]
        sweeps_dir: Option<PathBuf>,
    },
    /// Densify a scan with the diffusion sampler.
    Complete {
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dense target used to fit the denoiser (or as the oracle's answer).
        #[arg(long)]
        target: Option<PathBuf>,
        /// Load denoiser weights instead of fitting them.
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        save_denoiser: Option<PathBuf>,
        /// Test mode: use the exact-noise oracle for `--target`, which makes
        /// the output equal the target cloud.
        #[arg(long)]
        oracle: bool,
    },
    /// Place the initial Gaussians on a point cloud.
    InitGaussians {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly train the fusion network and the Gaussians.
    Train {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        gaussians: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        net_out: PathBuf,
        #[arg(long)]
        gaussians_out: PathBuf,
        /// Start from these network weights.
        #[arg(long)]
        net: Option<PathBuf>,
    },
    /// Refine Gaussians and splat them into an occupancy grid.
    Predict {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        gaussians: PathBuf,
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Store logits instead of labels.
        #[arg(long)]
        logits: bool,
    },
    /// Compare a predicted grid with the ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable stage.
    Gradcheck {
        #[arg(long, default_value_t = gradsuite::DEFAULT_SEED)]
        seed: u64,
    },
    /// Time splatting and fusion against the Gaussian count.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [128usize, 512, 2048])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Skip the fusion forward pass.
        #[arg(long)]
        no_gaf: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage end to end, writing artifacts and a report.
    Run {
        /// Overrides `paths.out_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let base = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut pairs = Vec::with_capacity(g.set.len());
    for s in &g.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("`--set {s}` is not KEY=VALUE")))?;
        pairs.push((k.trim(), v.trim()));
    }
    let cfg = base.with_overrides(pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    PointCloud::read(path)
}

fn read_gaussians(path: &Path) -> Result<GaussianSet> {
    GaussianSet::from_params(&ParamSet::load(path)?)
}

fn scene_input(cfg: &RunConfig, cloud: &PointCloud) -> Result<SceneInput> {
    let world = pipeline::make_world(cfg)?;
    let (cameras, images) = pipeline::views(cfg, &world)?;
    let cloud = pipeline::clip_to_grid(cloud, cfg);
    SceneInput::new(&cloud.points, &cloud.intensity, &cfg.grid, images, cameras, &cfg.gaf)
}

fn load_net(cfg: &RunConfig, path: &Path) -> Result<OccNet> {
    OccNet::from_params(cfg.gaf.clone(), cfg.num_classes(), ParamSet::load(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::GenScene { gt } => {
            let world = pipeline::make_world(&cfg)?;
            let grid = rasterize_ground_truth(&world, &cfg.grid, cfg.num_classes());
            OccupancyGrid::Labels(grid.clone()).write(&gt)?;
            println!("{} primitives, {} occupied voxels -> {}", world.primitives.len(), grid.labels.iter().filter(|l| **l != 0).count(), gt.display());
        }
        Command::SimulateLidar { scan, target, sweeps_dir } => {
            let world = pipeline::make_world(&cfg)?;
            let sweeps = pipeline::scan_world(&world, &cfg)?;
            let key = pipeline::keyframe(&sweeps)?;
            key.write(&scan)?;
            println!("scan: {} points -> {}", key.len(), scan.display());
            if let Some(t) = target {
                let agg = occfuse::scene::aggregate_sweeps(&sweeps);
                agg.write(&t)?;
                println!("target: {} points -> {}", agg.len(), t.display());
            }
            if let Some(dir) = sweeps_dir {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
                for (i, s) in sweeps.iter().enumerate() {
                    s.write(&dir.join(format!("sweep_{i:03}.gopc")))?;
                }
            }
        }
        Command::Complete { scan, out, target, denoiser, save_denoiser, oracle } => {
            let scan_cloud = read_cloud(&scan)?;
            let target_cloud = target.as_deref().map(read_cloud).transpose()?;
            let result = if oracle {
                let t = target_cloud.ok_or_else(|| Error::Config("--oracle needs --target".into()))?;
                let sampler = SamplerConfig { n_out: t.len(), steps: cfg.lcd.steps, mode: cfg.lcd.mode, seed_noise: true };
                let mut rng = SeedTree::new(cfg.seed).child("lcd").rng("sample");
                let den = OracleDenoiser { targets: t.points.clone() };
                reverse_sample(&den, &scan_cloud, &pipeline::schedule(&cfg)?, &sampler, &mut rng)?
            } else {
                let den = match (denoiser, &target_cloud) {
                    (Some(p), _) => MlpDenoiser::from_params(ParamSet::load(&p)?)?,
                    (None, Some(t)) => pipeline::pretrain_lcd(&cfg, &scan_cloud, t)?.0,
                    (None, None) => return Err(Error::Config("complete needs --denoiser or --target".into())),
                };
                if let Some(p) = save_denoiser {
                    den.params.save(p)?;
                }
                pipeline::complete(&cfg, &den, &scan_cloud, cfg.seed)?
            };
            result.write(&out)?;
            println!("completed: {} points -> {}", result.len(), out.display());
        }
        Command::InitGaussians { cloud, out } => {
            let c = pipeline::clip_to_grid(&read_cloud(&cloud)?, &cfg);
            let g = pipeline::initialize(&cfg, &c.points)?;
            g.to_params().save(&out)?;
            println!("{} Gaussians -> {}", g.len(), out.display());
        }
        Command::Train { cloud, gaussians, gt, net_out, gaussians_out, net } => {
            let scene = scene_input(&cfg, &read_cloud(&cloud)?)?;
            let g0 = read_gaussians(&gaussians)?;
            let gt = OccupancyGrid::read(&gt)?.labels();
            let mut model = match net {
                Some(p) => load_net(&cfg, &p)?,
                None => OccNet::new(cfg.gaf.clone(), cfg.num_classes(), pipeline::net_seed(&cfg))?,
            };
            let (g1, log) = pipeline::train_joint(&mut model, &g0, &scene, &gt, &cfg.train)?;
            model.params.save(&net_out)?;
            g1.to_params().save(&gaussians_out)?;
            println!("{} iterations, loss {:.6} -> {:.6}", log.losses.len(), log.losses.first().copied().unwrap_or(f64::NAN), log.final_loss());
        }
        Command::Predict { cloud, gaussians, net, out, logits } => {
            let scene = scene_input(&cfg, &read_cloud(&cloud)?)?;
            let g = read_gaussians(&gaussians)?;
            let model = load_net(&cfg, &net)?;
            let (_, grid) = pipeline::predict(&model, &g, &scene, &cfg.grid, cfg.train.radius_multiplier)?;
            let occ = if logits { OccupancyGrid::Logits(grid) } else { OccupancyGrid::Labels(grid.argmax()) };
            occ.write(&out)?;
            println!("prediction -> {}", out.display());
        }
        Command::Eval { pred, gt, out } => {
            let start = std::time::Instant::now();
            let p = OccupancyGrid::read(&pred)?.labels();
            let g = OccupancyGrid::read(&gt)?.labels();
            let mut report = MetricsReport::evaluate(&p, &g, cfg.eval.miou_mode, cfg.hash())?;
            report.wall_ms = start.elapsed().as_millis() as u64;
            let json = report.to_json();
            if let Some(o) = out {
                std::fs::write(&o, &json).map_err(|e| Error::Input(format!("{}: {e}", o.display())))?;
            }
            print!("{json}");
        }
        Command::Gradcheck { seed } => {
            let results = gradsuite::run_all(seed)?;
            for r in &results {
                println!("{:<22} max rel err {:.3e} (tol {:.0e}, {} components) {}", r.name, r.max_error, r.tolerance, r.checked, if r.passed() { "ok" } else { "FAIL" });
            }
            if let Some(bad) = results.iter().find(|r| !r.passed()) {
                return Err(Error::Numeric(format!("gradient check `{}` failed", bad.name)));
            }
        }
        Command::Bench { counts, repeats, no_gaf, out } => {
            let report = pipeline::bench(&cfg, &counts, repeats, !no_gaf)?;
            for r in &report.rows {
                println!("{:<16} N_G {:>6}  {:>10.3} ms", r.op, r.n_gaussians, r.wall_ms);
            }
            match report.peak_rss_kb {
                Some(kb) => println!("peak RSS {kb} kB"),
                None => println!("peak RSS unavailable"),
            }
            if let Some(o) = out {
                std::fs::write(&o, report.to_json()).map_err(|e| Error::Input(format!("{}: {e}", o.display())))?;
            }
        }
        Command::Run { out_dir } => {
            let mut cfg = cfg;
            if let Some(d) = out_dir {
                cfg.paths.out_dir = d.to_string_lossy().into_owned();
            }
            let s = pipeline::run_pipeline(&cfg)?;
            println!("iou {:.4} miou {:.4} -> {}", s.report.iou, s.report.miou, s.out_dir.display());
        }
    }
    Ok(())
}

/// 1 usage, 2 data, 3 numeric.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
