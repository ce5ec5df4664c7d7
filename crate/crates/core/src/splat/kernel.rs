use std::sync::Arc;

use rayon::prelude::*;

use super::gaussian::{gaussian_contribution, GaussianSet, QUAT_EPS};
use super::occupancy::LogitGrid;
use crate::autodiff::{Function, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{mat_t_vec, mat_vec, rot_from_unit_quat, sub, Mat3, Vec3, QUAT_IDENTITY};
use crate::scene::GridSpec;

/// Logit added to class 0 in every voxel.
pub const EMPTY_PRIOR: f64 = 1.0;
pub const DEFAULT_RADIUS_MULTIPLIER: f64 = 3.0;

/// Per-Gaussian geometry derived from raw parameters.
#[derive(Clone, Copy, Debug)]
struct Geo {
    mu: Vec3,
    /// normalized quaternion (identity when the raw one is degenerate)
    q: [f64; 4],
    /// norm of the raw quaternion; 0 marks the identity fallback
    qn: f64,
    r: Mat3,
    s: Vec3,
}

impl Geo {
    fn new(mu: Vec3, q_raw: [f64; 4], s: Vec3) -> Self {
        let qn = q_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (q, qn) = if qn > QUAT_EPS { (q_raw.map(|v| v / qn), qn) } else { (QUAT_IDENTITY, 0.0) };
        Self { mu, q, qn, r: rot_from_unit_quat(q), s }
    }

    /// Offset from the center and its rotated (unscaled) coordinates.
    fn local(&self, x: Vec3) -> (Vec3, Vec3) {
        let d = sub(x, self.mu);
        (d, mat_t_vec(&self.r, d))
    }

    /// Weight at `x`.
    #[cfg(test)]
    fn eval(&self, x: Vec3) -> f64 {
        let (_, y) = self.local(x);
        let z = [y[0] / self.s[0], y[1] / self.s[1], y[2] / self.s[2]];
        let m = z[0] * z[0] + z[1] * z[1] + z[2] * z[2];
        (-0.5 * m).exp()
    }
}

/// Gaussian-to-voxel incidence for one splat, stored both Gaussian-major
/// (for the adjoint) and voxel-major (for the forward sum). Both orders are
/// ascending, so sums are reproducible regardless of thread count.
pub struct SplatPlan {
    grid: GridSpec,
    geo: Vec<Geo>,
    g_off: Vec<usize>,
    pair_voxel: Vec<u32>,
    pair_w: Vec<f64>,
    v_off: Vec<usize>,
    /// voxel-major copies of the Gaussian index and weight
    v_gauss: Vec<u32>,
    v_w: Vec<f64>,
}

impl SplatPlan {
    fn build(geo: Vec<Geo>, grid: &GridSpec, radius_multiplier: f64) -> Self {
        let vs = grid.voxel_size;
        let per_gauss: Vec<Vec<(u32, f64)>> = geo
            .par_iter()
            .map(|g| {
                let r = radius_multiplier * g.s[0].max(g.s[1]).max(g.s[2]);
                if !r.is_finite() || g.mu.iter().any(|v| !v.is_finite()) {
                    return Vec::new();
                }
                let range = |a: usize| -> Option<(usize, usize)> {
                    let lo = ((g.mu[a] - r - grid.origin[a]) / vs - 0.5).ceil().max(0.0);
                    let hi = ((g.mu[a] + r - grid.origin[a]) / vs - 0.5).floor().min(grid.dims[a] as f64 - 1.0);
                    (lo <= hi).then_some((lo as usize, hi as usize))
                };
                let (Some(rx), Some(ry), Some(rz)) = (range(0), range(1), range(2)) else {
                    return Vec::new();
                };
                // Partial sums over x and y are hoisted out of the z loop.
                // Left-to-right addition keeps every value bit-identical to
                // `dist2` and `Geo::eval` at the voxel center.
                let rt = &g.r;
                let mut out = Vec::with_capacity((rx.1 - rx.0 + 1) * (ry.1 - ry.0 + 1) * (rz.1 - rz.0 + 1));
                for x in rx.0..=rx.1 {
                    let dx = grid.center([x, 0, 0])[0] - g.mu[0];
                    for y in ry.0..=ry.1 {
                        let dy = grid.center([0, y, 0])[1] - g.mu[1];
                        let dxy = dx * dx + dy * dy;
                        if dxy > r * r {
                            continue;
                        }
                        let pxy = [rt[0][0] * dx + rt[1][0] * dy, rt[0][1] * dx + rt[1][1] * dy, rt[0][2] * dx + rt[1][2] * dy];
                        let base = grid.flat([x, y, 0]);
                        for z in rz.0..=rz.1 {
                            let dz = grid.center([0, 0, z])[2] - g.mu[2];
                            if dxy + dz * dz > r * r {
                                continue;
                            }
                            let l = [(pxy[0] + rt[2][0] * dz) / g.s[0], (pxy[1] + rt[2][1] * dz) / g.s[1], (pxy[2] + rt[2][2] * dz) / g.s[2]];
                            let m = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
                            out.push(((base + z) as u32, (-0.5 * m).exp()));
                        }
                    }
                }
                out
            })
            .collect();

        let mut g_off = Vec::with_capacity(geo.len() + 1);
        g_off.push(0);
        let total: usize = per_gauss.iter().map(Vec::len).sum();
        let mut pair_voxel = Vec::with_capacity(total);
        let mut pair_w = Vec::with_capacity(total);
        for list in &per_gauss {
            for &(v, w) in list {
                pair_voxel.push(v);
                pair_w.push(w);
            }
            g_off.push(pair_voxel.len());
        }
        drop(per_gauss);

        let nv = grid.num_voxels();
        let mut v_off = vec![0usize; nv + 1];
        for &v in &pair_voxel {
            v_off[v as usize + 1] += 1;
        }
        for i in 0..nv {
            v_off[i + 1] += v_off[i];
        }
        let mut fill = v_off.clone();
        let mut v_gauss = vec![0u32; total];
        let mut v_w = vec![0.0; total];
        for gi in 0..geo.len() {
            for p in g_off[gi]..g_off[gi + 1] {
                let slot = &mut fill[pair_voxel[p] as usize];
                v_gauss[*slot] = gi as u32;
                v_w[*slot] = pair_w[p];
                *slot += 1;
            }
        }
        Self { grid: *grid, geo, g_off, pair_voxel, pair_w, v_off, v_gauss, v_w }
    }

    /// Number of Gaussian-voxel pairs evaluated.
    pub fn pairs(&self) -> usize {
        self.pair_voxel.len()
    }

    fn forward(&self, sem: &[f64], c: usize, empty_prior: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.num_voxels() * c];
        out.par_chunks_mut(c).enumerate().for_each(|(v, row)| {
            row[0] = empty_prior;
            let span = self.v_off[v]..self.v_off[v + 1];
            for (&g, &w) in self.v_gauss[span.clone()].iter().zip(&self.v_w[span]) {
                let g = g as usize;
                for (o, s) in row.iter_mut().zip(&sem[g * c..(g + 1) * c]) {
                    *o += w * s;
                }
            }
        });
        out
    }

    /// Adjoints for (mu, raw quaternion, log-scale, semantics).
    fn backward(&self, sem: &[f64], c: usize, grad: &[f64]) -> [Vec<f64>; 4] {
        let centers: Vec<Vec3> = (0..self.grid.num_voxels()).map(|v| self.grid.center_flat(v)).collect();
        let per: Vec<([f64; 3], [f64; 4], [f64; 3], Vec<f64>)> = (0..self.geo.len())
            .into_par_iter()
            .map(|gi| {
                let g = &self.geo[gi];
                let inv: [f64; 3] = std::array::from_fn(|a| 1.0 / (g.s[a] * g.s[a]));
                let sg = &sem[gi * c..(gi + 1) * c];
                let mut dmu = [0.0; 3];
                let mut dls = [0.0; 3];
                let mut dsem = vec![0.0; c];
                let mut dr = [[0.0; 3]; 3];
                for p in self.g_off[gi]..self.g_off[gi + 1] {
                    let v = self.pair_voxel[p] as usize;
                    let gv = &grad[v * c..(v + 1) * c];
                    let (d, y) = g.local(centers[v]);
                    let w = self.pair_w[p];
                    let mut gw = 0.0;
                    for k in 0..c {
                        gw += gv[k] * sg[k];
                        dsem[k] += w * gv[k];
                    }
                    // L depends on m = |y / s|^2 through w = exp(-m / 2)
                    let dm = -0.5 * w * gw;
                    let mut ay = [0.0; 3];
                    for a in 0..3 {
                        ay[a] = dm * 2.0 * y[a] * inv[a];
                        dls[a] -= dm * 2.0 * y[a] * y[a] * inv[a];
                    }
                    let dd = mat_vec(&g.r, ay);
                    for b in 0..3 {
                        dmu[b] -= dd[b];
                        for a in 0..3 {
                            dr[b][a] += ay[a] * d[b];
                        }
                    }
                }
                (dmu, quat_adjoint(g, &dr), dls, dsem)
            })
            .collect();
        let n = self.geo.len();
        let mut out = [vec![0.0; n * 3], vec![0.0; n * 4], vec![0.0; n * 3], vec![0.0; n * c]];
        for (i, (dmu, dq, dls, dsem)) in per.into_iter().enumerate() {
            out[0][3 * i..3 * i + 3].copy_from_slice(&dmu);
            out[1][4 * i..4 * i + 4].copy_from_slice(&dq);
            out[2][3 * i..3 * i + 3].copy_from_slice(&dls);
            out[3][c * i..c * (i + 1)].copy_from_slice(&dsem);
        }
        out
    }
}

/// Gradient w.r.t. the raw quaternion given `g = dL/dR`.
fn quat_adjoint(geo: &Geo, g: &Mat3) -> [f64; 4] {
    if geo.qn == 0.0 {
        return [0.0; 4];
    }
    let [w, x, y, z] = geo.q;
    let dw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let dx = 2.0 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0] + w * g[2][1]
        - 2.0 * x * g[2][2]);
    let dy = 2.0 * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1]
        - 2.0 * y * g[2][2]);
    let dz = 2.0 * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1] + y * g[1][2]
        + x * g[2][0]
        + y * g[2][1]);
    let gq = [dw, dx, dy, dz];
    // project out the radial component of the normalization
    let radial: f64 = (0..4).map(|i| gq[i] * geo.q[i]).sum();
    std::array::from_fn(|i| (gq[i] - geo.q[i] * radial) / geo.qn)
}

fn check_multiplier(m: f64) -> Result<()> {
    if !(m > 0.0) {
        return Err(Error::Config(format!("radius multiplier must be > 0, got {m}")));
    }
    Ok(())
}

fn geo_of_set(gset: &GaussianSet) -> Vec<Geo> {
    (0..gset.len()).map(|i| Geo::new(gset.mu[i], gset.rot[i], gset.scale[i])).collect()
}

/// Local splatting: each voxel sums the Gaussians whose center lies within
/// `radius_multiplier * max(scale)` of the voxel center.
pub fn splat_occupancy(gset: &GaussianSet, grid: &GridSpec, radius_multiplier: f64) -> Result<LogitGrid> {
    check_multiplier(radius_multiplier)?;
    let plan = SplatPlan::build(geo_of_set(gset), grid, radius_multiplier);
    let logits = plan.forward(&gset.sem, gset.num_classes, EMPTY_PRIOR);
    Ok(LogitGrid { spec: *grid, num_classes: gset.num_classes, logits })
}

/// Same as [`splat_occupancy`] but also returns the incidence count.
pub fn splat_with_stats(gset: &GaussianSet, grid: &GridSpec, radius_multiplier: f64) -> Result<(LogitGrid, usize)> {
    check_multiplier(radius_multiplier)?;
    let plan = SplatPlan::build(geo_of_set(gset), grid, radius_multiplier);
    let logits = plan.forward(&gset.sem, gset.num_classes, EMPTY_PRIOR);
    Ok((LogitGrid { spec: *grid, num_classes: gset.num_classes, logits }, plan.pairs()))
}

/// Every Gaussian at every voxel, no cutoff.
pub fn brute_force_occupancy(gset: &GaussianSet, grid: &GridSpec) -> Result<LogitGrid> {
    let c = gset.num_classes;
    let mut logits = vec![0.0; grid.num_voxels() * c];
    let gaussians: Vec<_> = (0..gset.len()).map(|i| gset.get(i)).collect();
    for v in 0..grid.num_voxels() {
        let x = grid.center_flat(v);
        let row = &mut logits[v * c..(v + 1) * c];
        row[0] += EMPTY_PRIOR;
        for g in &gaussians {
            for (o, val) in row.iter_mut().zip(gaussian_contribution(x, g)?) {
                *o += val;
            }
        }
    }
    Ok(LogitGrid { spec: *grid, num_classes: c, logits })
}

/// Multiplier large enough that every Gaussian reaches every voxel.
pub fn full_coverage_multiplier(gset: &GaussianSet, grid: &GridSpec) -> f64 {
    let lo = grid.center([0, 0, 0]);
    let hi = grid.center(grid.dims.map(|d| d - 1));
    let mut m: f64 = 1.0;
    for (mu, s) in gset.mu.iter().zip(&gset.scale) {
        let far: Vec3 = std::array::from_fn(|a| (mu[a] - lo[a]).abs().max((mu[a] - hi[a]).abs()));
        let reach = far.iter().map(|v| v * v).sum::<f64>().sqrt();
        m = m.max(1.01 * reach / s[0].max(s[1]).max(s[2]));
    }
    m
}

struct SplatFn {
    plan: Arc<SplatPlan>,
    c: usize,
}

impl Function for SplatFn {
    fn name(&self) -> &'static str {
        "splat"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let n = self.plan.geo.len();
        let [dmu, dq, dls, dsem] = self.plan.backward(inputs[3].data(), self.c, grad.data());
        vec![
            Some(Tensor::from_parts(vec![n, 3], dmu)),
            Some(Tensor::from_parts(vec![n, 4], dq)),
            Some(Tensor::from_parts(vec![n, 3], dls)),
            Some(Tensor::from_parts(vec![n, self.c], dsem)),
        ]
    }
}

/// Tape handles for trainable Gaussian parameters.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    /// `[N, 3]`
    pub mu: Var,
    /// `[N, 4]`, raw quaternions (normalized inside the op)
    pub rot: Var,
    /// `[N, 3]`
    pub log_scale: Var,
    /// `[N, C]`
    pub sem: Var,
}

/// Differentiable splat; returns logits of shape `[V, C]`.
pub fn splat_var(tape: &mut Tape, g: GaussianVars, grid: &GridSpec, radius_multiplier: f64) -> Result<Var> {
    check_multiplier(radius_multiplier)?;
    let (mu, rot, ls, sem) = (tape.value(g.mu), tape.value(g.rot), tape.value(g.log_scale), tape.value(g.sem));
    let n = mu.shape()[0];
    if mu.shape() != [n, 3] || rot.shape() != [n, 4] || ls.shape() != [n, 3] || sem.rank() != 2 || sem.shape()[0] != n {
        return Err(Error::shape(
            "splat",
            format!("mu {:?} rot {:?} log_scale {:?} sem {:?}", mu.shape(), rot.shape(), ls.shape(), sem.shape()),
        ));
    }
    let c = sem.shape()[1];
    let geo: Vec<Geo> = (0..n)
        .map(|i| {
            let v3 = |t: &Tensor| [t.data()[3 * i], t.data()[3 * i + 1], t.data()[3 * i + 2]];
            let q: [f64; 4] = rot.data()[4 * i..4 * i + 4].try_into().expect("4 values");
            Geo::new(v3(mu), q, v3(ls).map(f64::exp))
        })
        .collect();
    let plan = Arc::new(SplatPlan::build(geo, grid, radius_multiplier));
    let out = plan.forward(sem.data(), c, EMPTY_PRIOR);
    let value = Tensor::from_parts(vec![grid.num_voxels(), c], out);
    Ok(tape.custom(&[g.mu, g.rot, g.log_scale, g.sem], value, SplatFn { plan, c }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist2;
    use crate::autodiff::{gradcheck_many, GradCheckOptions};
    use crate::splat::gaussian::Gaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, c: usize, grid: &GridSpec) -> GaussianSet {
        let hi = grid.max_corner();
        let mut set = GaussianSet::empty(c);
        for _ in 0..n {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            set.push(Gaussian {
                mu: std::array::from_fn(|a| rng.random_range(grid.origin[a]..hi[a])),
                rot: q.map(|v| v / qn),
                scale: std::array::from_fn(|_| rng.random_range(0.2..1.0)),
                sem: (0..c).map(|_| rng.random_range(-2.0..2.0)).collect(),
            });
        }
        set
    }

    fn small_grid() -> GridSpec {
        GridSpec::new([-4.0, -4.0, -0.5], 0.5, [16, 16, 8]).unwrap()
    }

    #[test]
    fn empty_set_predicts_empty() {
        let g = splat_occupancy(&GaussianSet::empty(4), &small_grid(), 3.0).unwrap();
        assert!(g.argmax().labels.iter().all(|&l| l == 0));
        assert!(splat_occupancy(&GaussianSet::empty(4), &small_grid(), 0.0).is_err());
    }

    #[test]
    fn single_gaussian_wins_its_voxel() {
        let grid = small_grid();
        let center = grid.center([5, 6, 2]);
        let mut set = GaussianSet::empty(4);
        set.push(Gaussian { mu: center, rot: [1.0, 0.0, 0.0, 0.0], scale: [0.3; 3], sem: vec![0.0, 0.0, 5.0, 0.0] });
        let labels = splat_occupancy(&set, &grid, 3.0).unwrap().argmax();
        assert_eq!(labels.labels[grid.flat([5, 6, 2])], 2);
    }

    #[test]
    fn plan_weights_equal_direct_evaluation_bitwise() {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = random_set(&mut rng, 24, 3, &grid);
        let plan = SplatPlan::build(geo_of_set(&set), &grid, 2.5);
        for (gi, g) in plan.geo.iter().enumerate() {
            let r = 2.5 * g.s[0].max(g.s[1]).max(g.s[2]);
            let want: Vec<(u32, u64)> = (0..grid.num_voxels())
                .filter(|&v| dist2(grid.center_flat(v), g.mu) <= r * r)
                .map(|v| (v as u32, g.eval(grid.center_flat(v)).to_bits()))
                .collect();
            let got: Vec<(u32, u64)> = (plan.g_off[gi]..plan.g_off[gi + 1]).map(|p| (plan.pair_voxel[p], plan.pair_w[p].to_bits())).collect();
            assert_eq!(got, want, "gaussian {gi}");
        }
    }

    #[test]
    fn full_radius_matches_brute_force() {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = random_set(&mut rng, 16, 5, &grid);
        let m = full_coverage_multiplier(&set, &grid);
        let (fast, pairs) = splat_with_stats(&set, &grid, m).unwrap();
        assert_eq!(pairs, 16 * grid.num_voxels());
        let slow = brute_force_occupancy(&set, &grid).unwrap();
        let err = fast.logits.iter().zip(&slow.logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-9, "max abs error {err}");
    }

    #[test]
    fn permutation_invariance() {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(&mut rng, 24, 3, &grid);
        let perm: Vec<usize> = (0..24).rev().collect();
        let a = splat_occupancy(&set, &grid, 3.0).unwrap();
        let b = splat_occupancy(&set.permuted(&perm), &grid, 3.0).unwrap();
        // equal up to floating-point summation order
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn truncation_error_is_bounded() {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(&mut rng, 20, 3, &grid);
        let m = 1.5;
        let local = splat_occupancy(&set, &grid, m).unwrap();
        let full = brute_force_occupancy(&set, &grid).unwrap();
        let max_c = set.sem.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for v in 0..grid.num_voxels() {
            let x = grid.center_flat(v);
            let mut excluded = 0usize;
            let mut w_max: f64 = 0.0;
            for i in 0..set.len() {
                let s = set.scale[i];
                let r = m * s[0].max(s[1]).max(s[2]);
                if dist2(x, set.mu[i]) > r * r {
                    excluded += 1;
                    let mut g = set.get(i);
                    g.sem = vec![1.0];
                    // weight = exp(-r_maha^2 / 2), so the largest weight is the nearest
                    w_max = w_max.max(gaussian_contribution(x, &g).unwrap()[0]);
                }
            }
            let bound = excluded as f64 * w_max * max_c + 1e-12;
            for k in 0..3 {
                let e = (local.voxel(v)[k] - full.voxel(v)[k]).abs();
                assert!(e <= bound, "voxel {v}: error {e} > bound {bound}");
            }
        }
    }

    #[test]
    fn argmax_is_rotation_invariant_for_dominant_class() {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let center = grid.center([8, 8, 4]);
        for _ in 0..20 {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut set = GaussianSet::empty(4);
            set.push(Gaussian { mu: center, rot: q.map(|v| v / qn), scale: [0.9, 0.3, 0.5], sem: vec![0.0, 0.0, 0.0, 6.0] });
            let l = splat_occupancy(&set, &grid, 3.0).unwrap().argmax();
            assert_eq!(l.labels[grid.flat([8, 8, 4])], 3);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let grid = GridSpec::new([-1.0, -1.0, -0.5], 0.5, [4, 4, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(&mut rng, 3, 3, &grid);
        let p = set.to_params();
        // perturb the quaternions off the unit sphere to exercise normalization
        let mut rot = p.tensors()[1].clone();
        rot.data_mut().iter_mut().for_each(|v| *v *= 1.3);
        let weights = Tensor::new(
            vec![grid.num_voxels(), 3],
            (0..grid.num_voxels() * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let pts = vec![p.tensors()[0].clone(), rot, p.tensors()[2].clone(), p.tensors()[3].clone()];
        let report = gradcheck_many(
            |t, v| {
                let out = splat_var(t, GaussianVars { mu: v[0], rot: v[1], log_scale: v[2], sem: v[3] }, &grid, 100.0)?;
                let w = t.constant(weights.clone());
                let y = t.mul(out, w)?;
                Ok(t.sum(y))
            },
            &pts,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_error() < 1e-6, "{report:?}");
    }
}
