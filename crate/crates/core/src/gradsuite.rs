//! Finite-difference checks of the differentiable building blocks, runnable
//! outside the test harness (the `gradcheck` subcommand uses them).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{gradcheck_many, BoundParams, GradCheckOptions, Stencil, Tensor};
use crate::error::Result;
use crate::gaf::{GafConfig, OccNet, SceneInput};
use crate::geometry::{Pose, Vec3};
use crate::lcd::{diffusion_loss_var, draw_batch, Condition, DiffusionBatch, MlpDenoiser, NoiseSchedule};
use crate::objectives::{cross_entropy_var, lovasz_softmax_var};
use crate::scene::{Camera, GridSpec, Image};
use crate::splat::{splat_var, GaussianVars};

/// Outcome of one finite-difference suite.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn normal(shape: &[usize], sd: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn labels(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..c as u8)).collect()
}

/// Cross-entropy of splatted logits with respect to centers, rotations,
/// log-scales and semantics.
pub fn splat_ce(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridSpec::new([-1.0, -1.0, -0.5], 0.5, [4, 4, 3])?;
    let (n, c) = (3, 4);
    let mu = uniform(&[n, 3], -0.8, 0.8, &mut rng);
    let rot = normal(&[n, 4], 1.0, &mut rng);
    let ls = uniform(&[n, 3], -1.2, -0.3, &mut rng);
    let sem = normal(&[n, c], 1.0, &mut rng);
    let gt = labels(grid.num_voxels(), c, &mut rng);
    let rep = gradcheck_many(
        |t, v| {
            // the multiplier covers the grid so no voxel crosses the cutoff
            let logits = splat_var(t, GaussianVars { mu: v[0], rot: v[1], log_scale: v[2], sem: v[3] }, &grid, 100.0)?;
            cross_entropy_var(t, logits, &gt, None)
        },
        &[mu, rot, ls, sem],
        &GradCheckOptions::default(),
    )?;
    Ok(SuiteResult { name: "splat_cross_entropy", max_error: rep.max_error(), tolerance: 1e-5, checked: rep.checked.iter().sum() })
}

/// Occupancy cross-entropy after one refinement pass, with respect to every
/// network parameter and the Gaussians, on four anchors and one view.
pub fn gaf_forward_loss(seed: u64) -> Result<SuiteResult> {
    let cfg = GafConfig {
        d_pc: 6,
        d: 4,
        strides: vec![2, 4],
        n_off: 2,
        radii: vec![0.7, 0.7],
        codewords: 2,
        offset_hidden: 4,
        ffn_hidden: 5,
        ..GafConfig::default()
    };
    let c = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = OccNet::new(cfg.clone(), c, seed)?;
    for t in net.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let spec = GridSpec::new([-1.0, -1.0, 1.0], 0.5, [4, 4, 4])?;
    let pts: Vec<Vec3> = (0..40).map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(1.2..2.8)]).collect();
    let inten: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
    let img = Image { width: 8, height: 8, pixels: (0..64).map(|_| [rng.random(), rng.random(), rng.random()]).collect() };
    let cam = Camera { fx: 5.0, fy: 5.0, cx: 4.0, cy: 4.0, extrinsics: Pose::identity(), width: 8, height: 8 };
    let scene = SceneInput::new(&pts, &inten, &spec, vec![img], vec![cam], &cfg)?;
    let mu = Tensor::from_parts(vec![4, 3], vec![0.1, -0.2, 2.0, -0.3, 0.25, 1.7, 0.35, 0.05, 2.3, -0.1, -0.35, 2.1]);
    let rot = normal(&[4, 4], 1.0, &mut rng);
    let ls = uniform(&[4, 3], -1.4, -0.9, &mut rng);
    let sem = normal(&[4, c], 1.0, &mut rng);
    let gt = labels(spec.num_voxels(), c, &mut rng);
    let k = net.params.len();
    let mut points: Vec<Tensor> = net.params.tensors().to_vec();
    points.extend([mu, rot, ls, sem]);
    let rep = gradcheck_many(
        |tape, v| {
            let bound = BoundParams::from_vars(v[..k].to_vec());
            let g = GaussianVars { mu: v[k], rot: v[k + 1], log_scale: v[k + 2], sem: v[k + 3] };
            let out = net.forward(tape, &bound, &scene, g)?;
            let logits = splat_var(tape, out, &spec, 100.0)?;
            cross_entropy_var(tape, logits, &gt, None)
        },
        &points,
        // deep parameters get gradients near 1e-7, where central differences
        // at the default step are dominated by rounding
        &GradCheckOptions { max_per_input: Some(12), seed, h: 1e-4, stencil: Stencil::FivePoint },
    )?;
    Ok(SuiteResult { name: "gaf_forward_loss", max_error: rep.max_error(), tolerance: 1e-5, checked: rep.checked.iter().sum() })
}

/// Diffusion loss with respect to the denoiser weights.
pub fn diffusion(seed: u64) -> Result<SuiteResult> {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = |n: usize, z: f64, rng: &mut ChaCha8Rng| -> Vec<Vec3> { (0..n).map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), z]).collect() };
    let targets = plane(8, 0.3, &mut rng);
    let cond = Condition::new(&plane(12, 0.0, &mut rng))?;
    let batch = DiffusionBatch { t: 700, ..draw_batch(&targets, &sched, &mut rng)? };
    let net = MlpDenoiser::new(&mut rng);
    let rep = gradcheck_many(
        |t, v| diffusion_loss_var(t, &BoundParams::from_vars(v.to_vec()), &batch, &cond, &sched),
        net.params.tensors(),
        &GradCheckOptions { max_per_input: Some(40), seed, ..Default::default() },
    )?;
    Ok(SuiteResult { name: "diffusion_loss", max_error: rep.max_error(), tolerance: 1e-5, checked: rep.checked.iter().sum() })
}

/// Lovász-Softmax of softmax probabilities at a point without ties among
/// the per-class errors.
pub fn lovasz(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, c) = (10, 4);
    let logits = uniform(&[v, c], -2.0, 2.0, &mut rng);
    let gt = labels(v, c, &mut rng);
    let rep = gradcheck_many(
        |t, x| {
            let p = t.softmax(x[0]);
            lovasz_softmax_var(t, p, &gt)
        },
        std::slice::from_ref(&logits),
        &GradCheckOptions::default(),
    )?;
    Ok(SuiteResult { name: "lovasz_softmax", max_error: rep.max_error(), tolerance: 1e-4, checked: rep.checked.iter().sum() })
}

/// Seed used by the `gradcheck` subcommand and the acceptance run.
pub const DEFAULT_SEED: u64 = 7;

/// Every suite in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![splat_ce(seed)?, gaf_forward_loss(seed)?, diffusion(seed)?, lovasz(seed)?])
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_suites_pass() {
        for r in super::run_all(super::DEFAULT_SEED).unwrap() {
            assert!(r.passed(), "{r:?}");
            assert!(r.checked > 0);
        }
    }
}
