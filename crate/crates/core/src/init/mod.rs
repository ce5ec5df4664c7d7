//! Hybrid Gaussian initialization: density-driven centers plus uniform
//! random coverage of what is left.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::rng::SeedTree;
use crate::spatial::HashGrid;
use crate::splat::GaussianSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub num_gaussians: usize,
    pub density_fraction: f64,
    /// Suppression radius in meters.
    pub radius: f64,
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { num_gaussians: 512, density_fraction: 0.7, radius: 0.5, scale_range: (0.2, 1.0), seed: 0 }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.density_fraction) {
            return Err(Error::Config(format!("density_fraction must lie in [0, 1], got {}", self.density_fraction)));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::Config(format!("suppression radius must be > 0, got {}", self.radius)));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(Error::Config(format!("scale range needs 0 < lo <= hi, got ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Density-selected share of the budget before exhaustion.
    pub fn density_budget(&self) -> usize {
        (self.density_fraction * self.num_gaussians as f64).floor() as usize
    }
}

/// Output of [`density_select`].
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySelection {
    /// Point indices in selection order.
    pub centers: Vec<usize>,
    /// Points taken out of candidacy: the centers and everything they
    /// suppressed.
    pub removed: Vec<bool>,
}

/// Greedy density peaks. Each round counts, for every remaining point, the
/// remaining points within `radius` (itself included), takes the largest
/// count (lowest index on ties) and removes it with its neighbors.
pub fn density_select(points: &[Vec3], radius: f64, max_centers: usize) -> Result<DensitySelection> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("suppression radius must be > 0, got {radius}")));
    }
    let n = points.len();
    let grid = HashGrid::new(points, radius);
    let neighbors: Vec<Vec<usize>> = points.par_iter().map(|p| grid.within(*p, radius)).collect();
    let mut count: Vec<usize> = neighbors.iter().map(Vec::len).collect();
    let mut removed = vec![false; n];
    let mut heap: BinaryHeap<(usize, Reverse<usize>)> = (0..n).map(|i| (count[i], Reverse(i))).collect();
    let mut centers = Vec::new();
    while centers.len() < max_centers {
        let Some((c, Reverse(i))) = heap.pop() else { break };
        // stale entries carry an old count
        if removed[i] || c != count[i] {
            continue;
        }
        centers.push(i);
        let gone: Vec<usize> = neighbors[i].iter().copied().filter(|&j| !removed[j]).collect();
        for &j in &gone {
            removed[j] = true;
        }
        for &j in &gone {
            for &k in &neighbors[j] {
                if !removed[k] {
                    count[k] -= 1;
                    heap.push((count[k], Reverse(k)));
                }
            }
        }
    }
    Ok(DensitySelection { centers, removed })
}

/// `n` indices into `points`: without replacement while possible, then the
/// remainder with replacement.
pub fn random_coverage(points: &[Vec3], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    draw_from(&(0..points.len()).collect::<Vec<_>>(), n, rng)
}

fn draw_from(pool: &[usize], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::Input(format!("cannot draw {n} coverage points from an empty cloud")));
    }
    let first = n.min(pool.len());
    let mut out: Vec<usize> = sample(rng, pool.len(), first).into_iter().map(|k| pool[k]).collect();
    out.extend((first..n).map(|_| pool[rng.random_range(0..pool.len())]));
    Ok(out)
}

/// Gaussian centers on `points` with identity rotation, uniform per-axis
/// scales and zero semantic logits. The random share is drawn from points
/// neither selected nor suppressed; when those run out it falls back to
/// suppressed points and, past the cloud size, to repeats.
pub fn init_gaussians(points: &[Vec3], cfg: &InitConfig, num_classes: usize) -> Result<GaussianSet> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::Input("cannot initialize Gaussians from an empty cloud".into()));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    let tree = SeedTree::new(cfg.seed).child("init");
    let dens = density_select(points, cfg.radius, cfg.density_budget())?;
    let mut centers = dens.centers.clone();
    let want = cfg.num_gaussians.saturating_sub(centers.len());
    let free: Vec<usize> = (0..points.len()).filter(|&i| !dens.removed[i]).collect();
    let mut rng = tree.rng("coverage");
    if want <= free.len() {
        centers.extend(draw_from(&free, want, &mut rng)?);
    } else {
        centers.extend(&free);
        let chosen: std::collections::HashSet<usize> = dens.centers.iter().copied().collect();
        let suppressed: Vec<usize> = (0..points.len()).filter(|&i| dens.removed[i] && !chosen.contains(&i)).collect();
        let rest = want - free.len();
        if rest <= suppressed.len() {
            centers.extend(draw_from(&suppressed, rest, &mut rng)?);
        } else {
            centers.extend(&suppressed);
            centers.extend(draw_from(&(0..points.len()).collect::<Vec<_>>(), rest - suppressed.len(), &mut rng)?);
        }
    }
    let (lo, hi) = cfg.scale_range;
    let mut srng = tree.rng("scale");
    let mut set = GaussianSet::empty(num_classes);
    for &i in &centers {
        let scale = std::array::from_fn(|_| if hi > lo { srng.random_range(lo..=hi) } else { lo });
        set.mu.push(points[i]);
        set.rot.push([1.0, 0.0, 0.0, 0.0]);
        set.scale.push(scale);
        set.sem.extend(std::iter::repeat_n(0.0, num_classes));
    }
    Ok(set)
}
