use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Linear beta schedule with cumulative products. Index `t` runs `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA0: f64 = 3.0e-5;
pub const DEFAULT_BETA_T: f64 = 7.0e-3;

impl NoiseSchedule {
    pub fn new(t: usize, beta0: f64, beta_t: f64) -> Result<Self> {
        if t == 0 || !(beta0 > 0.0) || beta0 > beta_t || !(beta_t < 1.0) {
            return Err(Error::Config(format!("noise schedule needs T >= 1 and 0 < beta0 <= betaT < 1, got T={t}, {beta0}, {beta_t}")));
        }
        let beta: Vec<f64> = (0..t)
            .map(|i| if t == 1 { beta0 } else { beta0 + (beta_t - beta0) * i as f64 / (t - 1) as f64 })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Perturbation standard deviation `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t - 1]).sqrt()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Input(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(DEFAULT_T, DEFAULT_BETA0, DEFAULT_BETA_T).expect("default schedule is valid")
    }
}

pub fn standard_normal3(rng: &mut impl Rng) -> Vec3 {
    [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// `targets + sigma_t * eps` with the noise supplied by the caller. The mean
/// is not scaled.
pub fn perturb_with(targets: &[Vec3], eps: &[Vec3], t: usize, schedule: &NoiseSchedule) -> Result<Vec<Vec3>> {
    schedule.check_t(t)?;
    if eps.len() != targets.len() {
        return Err(Error::shape("forward_perturb", format!("{} targets vs {} noise rows", targets.len(), eps.len())));
    }
    let s = schedule.sigma(t);
    Ok(targets.iter().zip(eps).map(|(x, e)| [x[0] + s * e[0], x[1] + s * e[1], x[2] + s * e[2]]).collect())
}

/// Returns `(noised, eps)`.
pub fn forward_perturb(
    targets: &[Vec3],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    schedule.check_t(t)?;
    let eps: Vec<Vec3> = (0..targets.len()).map(|_| standard_normal3(rng)).collect();
    Ok((perturb_with(targets, &eps, t, schedule)?, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::new(1, 0.01, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 0.99);
        assert!(NoiseSchedule::new(0, 0.01, 0.02).is_err());
        assert!(NoiseSchedule::new(10, 0.02, 0.01).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 0.01).is_err());
        assert!(NoiseSchedule::new(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn default_schedule_values() {
        let s = NoiseSchedule::default();
        assert!((s.sigma(1) - 3.0e-5f64.sqrt()).abs() < 1e-12);
        assert!((s.sigma(1) - 5.477e-3).abs() < 1e-6);
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= 1.0 - s.beta(t);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        // frozen regression value of the running product
        assert!((s.alpha_bar(1000) - 0.029_503_843_815_620_8).abs() < 1e-12, "{}", s.alpha_bar(1000));
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.sigma(t) >= s.sigma(t - 1));
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = NoiseSchedule::default();
        let x = vec![[1.0, 2.0, 3.0], [-4.0, 0.5, 0.25]];
        for t in [1, 500, 1000] {
            assert_eq!(perturb_with(&x, &[[0.0; 3]; 2], t, &s).unwrap(), x);
        }
        assert!(perturb_with(&x, &[[0.0; 3]; 2], 1001, &s).is_err());
    }

    #[test]
    fn perturbation_keeps_the_mean() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![[5.0, -3.0, 1.0]; 50_000];
        let (noised, _) = forward_perturb(&x, 800, &s, &mut rng).unwrap();
        for a in 0..3 {
            let mean = noised.iter().map(|p| p[a] - x[0][a]).sum::<f64>() / x.len() as f64;
            assert!(mean.abs() < 4.0 * s.sigma(800) / (x.len() as f64).sqrt());
        }
    }
}
