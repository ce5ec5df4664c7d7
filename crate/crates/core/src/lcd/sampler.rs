use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{Condition, Denoiser};
use super::schedule::{standard_normal3, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scene::PointCloud;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Re-noise with the predicted noise.
    #[default]
    Deterministic,
    /// Re-noise with fresh Gaussian noise.
    Ancestral,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Self::Deterministic),
            "ancestral" => Ok(Self::Ancestral),
            _ => Err(Error::Config(format!("unknown sampling mode `{s}` (deterministic|ancestral)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_out: usize,
    pub steps: usize,
    pub mode: SampleMode,
    /// Add `sigma_T` noise to the duplicated seed points.
    pub seed_noise: bool,
}

/// `steps` indices from `T` downwards, evenly spaced: `T - floor(k T / steps)`.
pub fn visited_steps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!("sampling steps must be in 1..={total}, got {steps}")));
    }
    Ok((0..steps).map(|k| total - k * total / steps).collect())
}

/// Condition points repeated round-robin up to `n_out`.
pub fn seed_points(condition: &[Vec3], n_out: usize) -> Vec<Vec3> {
    (0..n_out).map(|j| condition[j % condition.len()]).collect()
}

/// Raw sampler over explicit seed positions; returns the final clean
/// estimate.
pub fn reverse_from(
    denoiser: &dyn Denoiser,
    condition: &Condition,
    seeds: &[Vec3],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Vec3>> {
    let ts = visited_steps(schedule.steps(), cfg.steps)?;
    let s0 = schedule.sigma(ts[0]);
    let mut x: Vec<Vec3> = seeds
        .iter()
        .map(|p| {
            if cfg.seed_noise {
                let e = standard_normal3(rng);
                [p[0] + s0 * e[0], p[1] + s0 * e[1], p[2] + s0 * e[2]]
            } else {
                *p
            }
        })
        .collect();
    for (k, &t) in ts.iter().enumerate() {
        let eps = denoiser.predict(&x, condition, t, schedule)?;
        if eps.len() != x.len() {
            return Err(Error::shape("reverse_sample", "denoiser changed the point count"));
        }
        let s = schedule.sigma(t);
        let x0: Vec<Vec3> = x.iter().zip(&eps).map(|(xi, e)| std::array::from_fn(|a| xi[a] - s * e[a])).collect();
        match ts.get(k + 1) {
            None => x = x0,
            Some(&next) => {
                let sn = schedule.sigma(next);
                x = x0
                    .iter()
                    .zip(&eps)
                    .map(|(p, e)| {
                        let n = match cfg.mode {
                            SampleMode::Deterministic => *e,
                            SampleMode::Ancestral => standard_normal3(rng),
                        };
                        std::array::from_fn(|a| p[a] + sn * n[a])
                    })
                    .collect();
            }
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite point after diffusion step {t}")));
        }
    }
    Ok(x)
}

/// Densify `condition` to `n_out` points. Generated points inherit the
/// intensity of their nearest condition point and share its frame.
pub fn reverse_sample(
    denoiser: &dyn Denoiser,
    condition: &PointCloud,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    if cfg.n_out < condition.len() {
        return Err(Error::Config(format!("n_out {} is below the condition size {}", cfg.n_out, condition.len())));
    }
    let cond = Condition::new(&condition.points)?;
    let seeds = seed_points(&condition.points, cfg.n_out);
    let points = reverse_from(denoiser, &cond, &seeds, schedule, cfg, rng)?;
    let intensity = points.iter().map(|p| condition.intensity[cond.nearest(*p)]).collect();
    Ok(PointCloud { points, intensity, pose: condition.pose })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::lcd::denoiser::{OracleDenoiser, ZeroDenoiser};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting<D>(D, AtomicUsize);

    impl<D: Denoiser> Denoiser for Counting<D> {
        fn predict(&self, x: &[Vec3], c: &Condition, t: usize, s: &NoiseSchedule) -> Result<Vec<Vec3>> {
            self.1.fetch_add(1, Ordering::Relaxed);
            self.0.predict(x, c, t, s)
        }
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..2.0)]).collect();
        PointCloud::new(pts, (0..n).map(|i| (i % 10) as f64 / 10.0).collect(), Pose::identity()).unwrap()
    }

    #[test]
    fn step_subsampling() {
        assert_eq!(visited_steps(1000, 1).unwrap(), vec![1000]);
        let s = visited_steps(1000, 50).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!((s[0], s[1], s[49]), (1000, 980, 20));
        assert!(visited_steps(10, 11).is_err());
        assert!(visited_steps(10, 0).is_err());
    }

    #[test]
    fn oracle_reconstructs_targets_exactly() {
        let sched = NoiseSchedule::default();
        let cond = cloud(40, 1);
        let targets = cloud(100, 2).points;
        let oracle = OracleDenoiser { targets: targets.clone() };
        for steps in [1, 7, 50, 1000] {
            for mode in [SampleMode::Deterministic, SampleMode::Ancestral] {
                let cfg = SamplerConfig { n_out: 100, steps, mode, seed_noise: true };
                let out = reverse_sample(&oracle, &cond, &sched, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
                let err = out.points.iter().zip(&targets).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs())).fold(0.0, f64::max);
                assert!(err <= 1e-9, "steps {steps} {mode:?}: {err}");
            }
        }
    }

    #[test]
    fn zero_denoiser_without_seed_noise_returns_duplicates() {
        let sched = NoiseSchedule::default();
        let cond = cloud(7, 4);
        let cfg = SamplerConfig { n_out: 20, steps: 5, mode: SampleMode::Deterministic, seed_noise: false };
        let out = reverse_sample(&ZeroDenoiser, &cond, &sched, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (j, p) in out.points.iter().enumerate() {
            assert_eq!(*p, cond.points[j % 7]);
            assert_eq!(out.intensity[j], cond.intensity[j % 7]);
        }
    }

    #[test]
    fn one_denoiser_call_per_visited_step() {
        let sched = NoiseSchedule::default();
        let d = Counting(ZeroDenoiser, AtomicUsize::new(0));
        let cfg = SamplerConfig { n_out: 10, steps: 50, mode: SampleMode::Ancestral, seed_noise: true };
        reverse_sample(&d, &cloud(10, 5), &sched, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.1.load(Ordering::Relaxed), 50);
        let too_many = SamplerConfig { steps: 1001, ..cfg.clone() };
        assert!(reverse_sample(&d, &cloud(10, 5), &sched, &too_many, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let too_few = SamplerConfig { n_out: 5, ..cfg };
        assert!(reverse_sample(&d, &cloud(10, 5), &sched, &too_few, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
