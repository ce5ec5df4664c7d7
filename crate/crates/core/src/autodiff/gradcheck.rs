//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central,
    /// Fourth-order central difference using `x ± h` and `x ± 2h`.
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub stencil: Stencil,
    /// Check at most this many randomly chosen components per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, stencil: Stencil::Central, max_per_input: None, seed: 0 }
    }
}

/// Outcome of a multi-input check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input tensor.
    pub per_input: Vec<f64>,
    /// Number of components compared per input.
    pub checked: Vec<usize>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().cloned().fold(0.0, f64::max)
    }
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.shape() != [1] {
        return Err(Error::Contract(format!("gradcheck function must return shape [1], got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compare tape gradients of `f` at `points` against finite differences.
pub fn gradcheck_many<F>(f: F, points: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(opts.h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {}", opts.h)));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v).clone()).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut jobs = Vec::new();
    let mut checked = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let idx: Vec<usize> = match opts.max_per_input {
            Some(k) if k < p.len() => {
                let mut v = sample(&mut rng, p.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..p.len()).collect(),
        };
        checked.push(idx.len());
        jobs.extend(idx.into_iter().map(|j| (i, j)));
    }

    let h = opts.h;
    let eval_at = |i: usize, j: usize, delta: f64| -> Result<f64> {
        let mut pts = points.to_vec();
        pts[i].data_mut()[j] += delta;
        eval_scalar(&f, &pts)
    };
    let errors: Vec<Result<(usize, f64)>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let numeric = match opts.stencil {
                Stencil::Central => (eval_at(i, j, h)? - eval_at(i, j, -h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    let (p1, m1) = (eval_at(i, j, h)?, eval_at(i, j, -h)?);
                    let (p2, m2) = (eval_at(i, j, 2.0 * h)?, eval_at(i, j, -2.0 * h)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
                }
            };
            let a = analytic[i].data()[j];
            if a.is_nan() || numeric.is_nan() {
                return Err(Error::Numeric(format!(
                    "NaN in gradient check at input {i} component {j} (analytic {a}, numeric {numeric})"
                )));
            }
            Ok((i, relative_error(a, numeric)))
        })
        .collect();
    let mut per_input = vec![0.0f64; points.len()];
    for e in errors {
        let (i, err) = e?;
        per_input[i] = per_input[i].max(err);
    }
    Ok(GradCheckReport { per_input, checked })
}

/// Single-input convenience form: max relative error over all components.
pub fn gradcheck<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    let opts = GradCheckOptions { h, ..Default::default() };
    let report = gradcheck_many(|t, v| f(t, v[0]), std::slice::from_ref(point), &opts)?;
    Ok(report.max_error())
}
