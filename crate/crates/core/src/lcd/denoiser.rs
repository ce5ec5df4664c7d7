use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::schedule::NoiseSchedule;
use crate::autodiff::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::spatial::HashGrid;

/// Noise estimator `eps_hat(x_t, P, t)`.
pub trait Denoiser: Sync {
    /// One row per noised point.
    fn predict(&self, noised: &[Vec3], condition: &Condition, t: usize, schedule: &NoiseSchedule) -> Result<Vec<Vec3>>;
}

/// Conditioning cloud with its neighbor index.
pub struct Condition {
    grid: HashGrid,
}

impl Condition {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Input("diffusion condition cloud is empty".into()));
        }
        Ok(Self { grid: HashGrid::new(points, 1.0) })
    }

    pub fn points(&self) -> &[Vec3] {
        self.grid.points()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn nearest(&self, q: Vec3) -> usize {
        self.grid.knn(q, 1)[0].0
    }

    pub(crate) fn knn(&self, q: Vec3, k: usize) -> Vec<(usize, f64)> {
        self.grid.knn(q, k)
    }
}

pub const TIME_EMBED: usize = 32;
pub const KNN: usize = 8;
/// Input width: scaled coordinates, time embedding, two offsets.
pub const FEATURES: usize = 3 + TIME_EMBED + 3 + 3;
pub const HIDDEN: usize = 64;
/// Scaled offsets are clipped to this magnitude.
const OFFSET_CLIP: f64 = 4.0;
/// Coordinates are divided by this before entering the network.
const COORD_SCALE: f64 = 10.0;

/// Sinusoidal embedding of the step index.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBED] {
    let half = TIME_EMBED / 2;
    let mut out = [0.0; TIME_EMBED];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

/// Per-point network inputs: `x / 10`, time embedding, and the offsets to the
/// mean of the nearest condition points and to the single nearest one, both
/// divided by `sigma_t` and clipped.
pub fn features(noised: &[Vec3], condition: &Condition, t: usize, schedule: &NoiseSchedule) -> Tensor {
    let sigma = schedule.sigma(t);
    let temb = time_embedding(t);
    let clip = |v: f64| (v / sigma).clamp(-OFFSET_CLIP, OFFSET_CLIP);
    let pts = condition.points();
    let rows: Vec<[f64; FEATURES]> = noised
        .par_iter()
        .map(|&x| {
            let nn = condition.knn(x, KNN);
            let k = nn.len() as f64;
            let mean: Vec3 = std::array::from_fn(|a| nn.iter().map(|(i, _)| pts[*i][a]).sum::<f64>() / k);
            let near = pts[nn[0].0];
            let mut row = [0.0; FEATURES];
            for a in 0..3 {
                row[a] = x[a] / COORD_SCALE;
                row[3 + TIME_EMBED + a] = clip(x[a] - mean[a]);
                row[6 + TIME_EMBED + a] = clip(x[a] - near[a]);
            }
            row[3..3 + TIME_EMBED].copy_from_slice(&temb);
            row
        })
        .collect();
    let data = rows.into_iter().flatten().collect();
    Tensor::from_parts(vec![noised.len(), FEATURES], data)
}

/// Three-layer per-point network, hidden width 64, GELU.
#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    pub params: ParamSet,
}

impl MlpDenoiser {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let mut dense = |name: &str, fan_in: usize, fan_out: usize, gain: f64| {
            let sd = gain / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            params.insert(format!("lcd.{name}.w"), Tensor::from_parts(vec![fan_in, fan_out], w)).expect("unique name");
            params.insert(format!("lcd.{name}.b"), Tensor::zeros(&[fan_out])).expect("unique name");
        };
        dense("l1", FEATURES, HIDDEN, 1.0);
        dense("l2", HIDDEN, HIDDEN, 1.0);
        dense("l3", HIDDEN, 3, 0.1);
        Self { params }
    }

    /// Parameter names and shapes, in binding order.
    pub fn layout() -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, i, o) in [("l1", FEATURES, HIDDEN), ("l2", HIDDEN, HIDDEN), ("l3", HIDDEN, 3)] {
            out.push((format!("lcd.{name}.w"), vec![i, o]));
            out.push((format!("lcd.{name}.b"), vec![o]));
        }
        out
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let layout = Self::layout();
        let ok = params.len() == layout.len()
            && layout.iter().zip(params.names().iter().zip(params.tensors())).all(|((n, s), (pn, t))| n == pn && s == t.shape());
        if !ok {
            return Err(Error::Input("denoiser checkpoint does not match the network layout".into()));
        }
        Ok(Self { params })
    }

    /// Network output for a `[M, FEATURES]` input already on the tape.
    pub fn forward(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in 0..3 {
            let z = tape.matmul(h, p.var(2 * layer))?;
            let z = tape.add(z, p.var(2 * layer + 1))?;
            h = if layer < 2 { tape.gelu(z) } else { z };
        }
        Ok(h)
    }
}

impl Denoiser for MlpDenoiser {
    fn predict(&self, noised: &[Vec3], condition: &Condition, t: usize, schedule: &NoiseSchedule) -> Result<Vec<Vec3>> {
        if noised.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape);
        let x = tape.constant(features(noised, condition, t, schedule));
        let y = Self::forward(&mut tape, &bound, x)?;
        let out = tape.value(y);
        if !out.all_finite() {
            return Err(Error::Numeric("denoiser produced a non-finite estimate".into()));
        }
        Ok(out.data().chunks(3).map(|r| [r[0], r[1], r[2]]).collect())
    }
}

/// Test oracle that knows the clean point behind each row and returns the
/// exact noise `(x_t - target) / sigma_t`.
pub struct OracleDenoiser {
    pub targets: Vec<Vec3>,
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, noised: &[Vec3], _condition: &Condition, t: usize, schedule: &NoiseSchedule) -> Result<Vec<Vec3>> {
        if noised.len() != self.targets.len() {
            return Err(Error::shape("oracle_denoiser", format!("{} rows vs {} targets", noised.len(), self.targets.len())));
        }
        let s = schedule.sigma(t);
        Ok(noised.iter().zip(&self.targets).map(|(x, y)| std::array::from_fn(|a| (x[a] - y[a]) / s)).collect())
    }
}

/// Always predicts zero noise.
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(&self, noised: &[Vec3], _: &Condition, _: usize, _: &NoiseSchedule) -> Result<Vec<Vec3>> {
        Ok(vec![[0.0; 3]; noised.len()])
    }
}
