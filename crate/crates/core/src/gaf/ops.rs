//! Structured differentiable ops used by the fusion network.

use rustc_hash::FxHashMap as HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{gemm, Function, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{mat_t_vec, Vec3};
use crate::scene::{Camera, GridSpec};

/// Marks a missing neighbor in a [`NeighborTable`].
const NONE: u32 = u32::MAX;

/// Tap index of offset `(dx, dy, dz)` in `-1..=1`.
pub fn tap_index(dx: i64, dy: i64, dz: i64) -> usize {
    ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize
}

pub const CENTER_TAP: usize = 13;

/// For every occupied site, the row of each of its 27 neighbors.
#[derive(Clone, Debug)]
pub struct NeighborTable {
    rows: Arc<Vec<[u32; 27]>>,
}

impl NeighborTable {
    pub fn new(coords: &[[usize; 3]]) -> Self {
        let index: HashMap<[i64; 3], u32> =
            coords.iter().enumerate().map(|(i, c)| (c.map(|v| v as i64), i as u32)).collect();
        let rows = coords
            .iter()
            .map(|c| {
                let mut row = [NONE; 27];
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let key = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                            if let Some(&j) = index.get(&key) {
                                row[tap_index(dx, dy, dz)] = j;
                            }
                        }
                    }
                }
                row
            })
            .collect();
        Self { rows: Arc::new(rows) }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `[n, 27 * c]` with zeros at missing neighbors.
    fn gather(&self, x: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * 27 * c];
        out.par_chunks_mut(27 * c).zip(self.rows.par_iter()).for_each(|(dst, row)| {
            for (k, &j) in row.iter().enumerate() {
                if j != NONE {
                    dst[k * c..(k + 1) * c].copy_from_slice(&x[j as usize * c..(j as usize + 1) * c]);
                }
            }
        });
        out
    }

    fn scatter(&self, g: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * c];
        for (row, src) in self.rows.iter().zip(g.chunks(27 * c)) {
            for (k, &j) in row.iter().enumerate() {
                if j != NONE {
                    let dst = &mut out[j as usize * c..(j as usize + 1) * c];
                    for (d, s) in dst.iter_mut().zip(&src[k * c..(k + 1) * c]) {
                        *d += s;
                    }
                }
            }
        }
        out
    }
}

struct SparseConvFn {
    table: NeighborTable,
    cin: usize,
    cout: usize,
}

impl Function for SparseConvFn {
    fn name(&self) -> &'static str {
        "sparse_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let n = self.table.len();
        let (cin, cout) = (self.cin, self.cout);
        let cols = self.table.gather(inputs[0].data(), cin);
        let dw = gemm(&cols, grad.data(), 27 * cin, n, cout, true, false);
        let dcols = gemm(grad.data(), inputs[1].data(), n, cout, 27 * cin, false, true);
        let dx = self.table.scatter(&dcols, cin);
        let db = (0..cout).map(|o| (0..n).map(|i| grad.data()[i * cout + o]).sum()).collect();
        vec![
            Some(Tensor::from_parts(vec![n, cin], dx)),
            Some(Tensor::from_parts(vec![27 * cin, cout], dw)),
            Some(Tensor::from_parts(vec![cout], db)),
        ]
    }
}

/// Submanifold 3x3x3 convolution: outputs only at occupied sites.
/// `x: [n, cin]`, `w: [27 * cin, cout]` (tap-major), `b: [cout]`.
pub fn sparse_conv(tape: &mut Tape, table: &NeighborTable, x: Var, w: Var, b: Var) -> Result<Var> {
    let (sx, sw, sb) = (tape.shape(x).to_vec(), tape.shape(w).to_vec(), tape.shape(b).to_vec());
    let n = table.len();
    if sx.len() != 2 || sx[0] != n || sw.len() != 2 || sw[0] != 27 * sx[1] || sb != [sw[1]] {
        return Err(Error::shape("sparse_conv", format!("x {sx:?} w {sw:?} b {sb:?} for {n} sites")));
    }
    let (cin, cout) = (sx[1], sw[1]);
    let cols = table.gather(tape.value(x).data(), cin);
    let mut out = gemm(&cols, tape.value(w).data(), n, 27 * cin, cout, false, false);
    let bias = tape.value(b).data();
    for row in out.chunks_mut(cout) {
        for (o, bv) in row.iter_mut().zip(bias) {
            *o += bv;
        }
    }
    Ok(tape.custom(&[x, w, b], Tensor::from_parts(vec![n, cout], out), SparseConvFn { table: table.clone(), cin, cout }))
}

struct GatherRowsFn {
    index: Arc<Vec<usize>>,
    rows: usize,
}

impl Function for GatherRowsFn {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let d = grad.last_dim();
        let mut out = vec![0.0; self.rows * d];
        for (k, &i) in self.index.iter().enumerate() {
            for c in 0..d {
                out[i * d + c] += grad.data()[k * d + c];
            }
        }
        vec![Some(Tensor::from_parts(vec![self.rows, d], out))]
    }
}

/// Rows of `x: [r, d]` selected by `index` (repeats allowed).
pub fn gather_rows(tape: &mut Tape, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || index.iter().any(|&i| i >= s[0]) {
        return Err(Error::shape("gather_rows", format!("index out of range for {s:?}")));
    }
    let d = s[1];
    let v = tape.value(x).data();
    let data = index.iter().flat_map(|&i| v[i * d..(i + 1) * d].iter().copied()).collect();
    Ok(tape.custom(&[x], Tensor::from_parts(vec![index.len(), d], data), GatherRowsFn { index, rows: s[0] }))
}

/// Bilinear interpolation weights for a location in map units (texel
/// centers at `+0.5`), clamped to the border. Returns
/// `(i0, i1, tx, j0, j1, ty, inside_x, inside_y)`.
fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> (usize, usize, f64, usize, usize, f64, bool, bool) {
    let axis = |p: f64, n: usize| {
        let hi = (n - 1) as f64;
        let f = p - 0.5;
        let inside = f > 0.0 && f < hi;
        let f = f.clamp(0.0, hi);
        let i0 = (f.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64, inside)
    };
    let (i0, i1, tx, ix) = axis(x, w);
    let (j0, j1, ty, iy) = axis(y, h);
    (i0, i1, tx, j0, j1, ty, ix, iy)
}

/// Value-level bilinear sample of a `[h * w, d]` row-major map.
pub fn bilinear_value(map: &[f64], h: usize, w: usize, d: usize, loc: [f64; 2]) -> Vec<f64> {
    let (i0, i1, tx, j0, j1, ty, _, _) = bilinear_taps(loc[0], loc[1], w, h);
    let at = |j: usize, i: usize, c: usize| map[(j * w + i) * d + c];
    (0..d)
        .map(|c| {
            (1.0 - ty) * ((1.0 - tx) * at(j0, i0, c) + tx * at(j0, i1, c))
                + ty * ((1.0 - tx) * at(j1, i0, c) + tx * at(j1, i1, c))
        })
        .collect()
}

struct BilinearFn {
    h: usize,
    w: usize,
}

impl Function for BilinearFn {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (map, loc) = (inputs[0].data(), inputs[1].data());
        let d = inputs[0].last_dim();
        let (h, w) = (self.h, self.w);
        let mut dmap = vec![0.0; h * w * d];
        let mut dloc = vec![0.0; loc.len()];
        for (p, g) in grad.data().chunks(d).enumerate() {
            let (i0, i1, tx, j0, j1, ty, ix, iy) = bilinear_taps(loc[2 * p], loc[2 * p + 1], w, h);
            let taps = [
                (j0, i0, (1.0 - ty) * (1.0 - tx)),
                (j0, i1, (1.0 - ty) * tx),
                (j1, i0, ty * (1.0 - tx)),
                (j1, i1, ty * tx),
            ];
            for (j, i, wt) in taps {
                for c in 0..d {
                    dmap[(j * w + i) * d + c] += wt * g[c];
                }
            }
            let at = |j: usize, i: usize, c: usize| map[(j * w + i) * d + c];
            let (mut gx, mut gy) = (0.0, 0.0);
            for c in 0..d {
                gx += g[c] * ((1.0 - ty) * (at(j0, i1, c) - at(j0, i0, c)) + ty * (at(j1, i1, c) - at(j1, i0, c)));
                gy += g[c] * ((1.0 - tx) * (at(j1, i0, c) - at(j0, i0, c)) + tx * (at(j1, i1, c) - at(j0, i1, c)));
            }
            dloc[2 * p] = if ix { gx } else { 0.0 };
            dloc[2 * p + 1] = if iy { gy } else { 0.0 };
        }
        vec![
            Some(Tensor::from_parts(vec![h * w, d], dmap)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), dloc)),
        ]
    }
}

/// Sample `map: [h * w, d]` at `loc: [P, 2]` (x along width, y along
/// height); returns `[P, d]`.
pub fn bilinear_sample(tape: &mut Tape, map: Var, h: usize, w: usize, loc: Var) -> Result<Var> {
    let (sm, sl) = (tape.shape(map).to_vec(), tape.shape(loc).to_vec());
    if h == 0 || w == 0 || sm.len() != 2 || sm[0] != h * w || sl.len() != 2 || sl[1] != 2 {
        return Err(Error::shape("bilinear_sample", format!("map {sm:?} as {h}x{w}, loc {sl:?}")));
    }
    let d = sm[1];
    let (m, l) = (tape.value(map).data(), tape.value(loc).data());
    if !l.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite sampling location".into()));
    }
    let data: Vec<f64> = l.chunks(2).flat_map(|p| bilinear_value(m, h, w, d, [p[0], p[1]])).collect();
    Ok(tape.custom(&[map, loc], Tensor::from_parts(vec![sl[0], d], data), BilinearFn { h, w }))
}

/// Occupied voxel rows within `radius` of each anchor, with kernel weights.
type Neighborhood = Vec<(usize, f64)>;

struct AnchorFeatureFn {
    hoods: Arc<Vec<Neighborhood>>,
    centers: Arc<Vec<Vec3>>,
    gamma: f64,
}

impl Function for AnchorFeatureFn {
    fn name(&self) -> &'static str {
        "anchor_geometry_feature"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (mu, f) = (inputs[0].data(), inputs[1].data());
        let d = inputs[1].last_dim();
        let n = self.hoods.len();
        let mut dmu = vec![0.0; n * 3];
        let mut df = vec![0.0; f.len()];
        for (i, hood) in self.hoods.iter().enumerate() {
            if hood.is_empty() {
                continue;
            }
            let total: f64 = hood.iter().map(|(_, w)| w).sum();
            let g = &grad.data()[i * d..(i + 1) * d];
            let out = &output.data()[i * d..(i + 1) * d];
            let m = [mu[3 * i], mu[3 * i + 1], mu[3 * i + 2]];
            for &(v, w) in hood {
                let row = &f[v * d..(v + 1) * d];
                for c in 0..d {
                    df[v * d + c] += w / total * g[c];
                }
                // d f / d w_v = (F_v - f) / total
                let dw: f64 = (0..d).map(|c| g[c] * (row[c] - out[c])).sum::<f64>() / total;
                let p = self.centers[v];
                let diff = [m[0] - p[0], m[1] - p[1], m[2] - p[2]];
                let r = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
                if r > 0.0 {
                    for a in 0..3 {
                        dmu[3 * i + a] += dw * (-self.gamma * w * diff[a] / r);
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![n, 3], dmu)), Some(Tensor::from_parts(inputs[1].shape().to_vec(), df))]
    }
}

/// Lookup from occupied voxel index to feature row.
#[derive(Clone, Debug)]
pub struct VoxelIndex {
    pub spec: GridSpec,
    pub coords: Vec<[usize; 3]>,
    rows: HashMap<[usize; 3], usize>,
}

impl VoxelIndex {
    pub fn new(spec: GridSpec, coords: Vec<[usize; 3]>) -> Self {
        let rows = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Self { spec, coords, rows }
    }

    pub fn row(&self, c: [usize; 3]) -> Option<usize> {
        self.rows.get(&c).copied()
    }

    /// Rows of occupied voxels whose centers lie within `r` of `q`,
    /// ascending.
    pub fn within(&self, q: Vec3, r: f64) -> Vec<usize> {
        let s = &self.spec;
        let mut out = Vec::new();
        if !(r >= 0.0) || !q.iter().all(|v| v.is_finite()) {
            return out;
        }
        let range = |a: usize| {
            let lo = ((q[a] - r - s.origin[a]) / s.voxel_size - 0.5).ceil().max(0.0);
            let hi = ((q[a] + r - s.origin[a]) / s.voxel_size - 0.5).floor().min(s.dims[a] as f64 - 1.0);
            (lo as i64, hi as i64)
        };
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            for y in y0..=y1 {
                for z in z0..=z1 {
                    let c = [x as usize, y as usize, z as usize];
                    if let Some(row) = self.row(c) {
                        let p = s.center(c);
                        if crate::geometry::dist2(p, q) <= r * r {
                            out.push(row);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Kernel-weighted mean of voxel features around each anchor.
/// `mu: [N, 3]`, `features: [V, d]`, `radius[i]` per anchor. Anchors with
/// no occupied voxel in range get a zero descriptor.
pub fn anchor_geometry_feature(
    tape: &mut Tape,
    mu: Var,
    features: Var,
    index: &VoxelIndex,
    radius: &[f64],
    gamma: f64,
) -> Result<Var> {
    let (sm, sf) = (tape.shape(mu).to_vec(), tape.shape(features).to_vec());
    let n = sm[0];
    if sm != [n, 3] || sf.len() != 2 || sf[0] != index.coords.len() || radius.len() != n {
        return Err(Error::shape("anchor_geometry_feature", format!("mu {sm:?} features {sf:?} radii {}", radius.len())));
    }
    let d = sf[1];
    let centers: Vec<Vec3> = index.coords.iter().map(|c| index.spec.center(*c)).collect();
    let m = tape.value(mu).data();
    let hoods: Vec<Neighborhood> = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = [m[3 * i], m[3 * i + 1], m[3 * i + 2]];
            index
                .within(q, radius[i])
                .into_iter()
                .map(|v| (v, (-gamma * crate::geometry::dist2(centers[v], q).sqrt()).exp()))
                .collect()
        })
        .collect();
    let f = tape.value(features).data();
    let mut out = vec![0.0; n * d];
    for (i, hood) in hoods.iter().enumerate() {
        let total: f64 = hood.iter().map(|(_, w)| w).sum();
        if hood.is_empty() || !(total > 0.0) {
            continue;
        }
        for &(v, w) in hood {
            for c in 0..d {
                out[i * d + c] += w * f[v * d + c] / total;
            }
        }
    }
    // weights can underflow for far voxels; keep only anchors with mass
    let hoods = hoods.into_iter().map(|h| if h.iter().map(|(_, w)| w).sum::<f64>() > 0.0 { h } else { Vec::new() }).collect();
    Ok(tape.custom(
        &[mu, features],
        Tensor::from_parts(vec![n, d], out),
        AnchorFeatureFn { hoods: Arc::new(hoods), centers: Arc::new(centers), gamma },
    ))
}

/// Pinhole projection of one point: pixel, depth and visibility.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pix: [f64; 2],
    pub depth: f64,
    pub in_frustum: bool,
}

/// Visible when the depth is positive and the pixel lies inside the image.
pub fn project(mu: Vec3, camera: &Camera) -> Projection {
    let c = camera.to_camera(mu);
    let depth = c[2];
    if !(depth > 0.0) {
        return Projection { pix: [f64::NAN; 2], depth, in_frustum: false };
    }
    let pix = [camera.fx * c[0] / depth + camera.cx, camera.fy * c[1] / depth + camera.cy];
    let in_frustum = pix[0] >= 0.0 && pix[0] < camera.width as f64 && pix[1] >= 0.0 && pix[1] < camera.height as f64;
    Projection { pix, depth, in_frustum }
}

struct ProjectFn {
    camera: Camera,
    visible: Arc<Vec<bool>>,
}

impl Function for ProjectFn {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mu = inputs[0].data();
        let n = self.visible.len();
        let rot = self.camera.extrinsics.matrix();
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            if !self.visible[i] {
                continue;
            }
            let c = self.camera.to_camera([mu[3 * i], mu[3 * i + 1], mu[3 * i + 2]]);
            let (gu, gv) = (grad.data()[2 * i], grad.data()[2 * i + 1]);
            let z = c[2];
            let dc = [
                gu * self.camera.fx / z,
                gv * self.camera.fy / z,
                -(gu * self.camera.fx * c[0] + gv * self.camera.fy * c[1]) / (z * z),
            ];
            let dw = mat_t_vec(&rot, dc);
            out[3 * i..3 * i + 3].copy_from_slice(&dw);
        }
        vec![Some(Tensor::from_parts(vec![n, 3], out))]
    }
}

/// Differentiable projection of `mu: [N, 3]`. Returns the `[N, 2]` pixel
/// tensor (zero rows for anchors outside the frustum) and the visibility
/// flags.
pub fn project_var(tape: &mut Tape, mu: Var, camera: &Camera) -> Result<(Var, Vec<bool>)> {
    let s = tape.shape(mu).to_vec();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::shape("project", format!("mu {s:?}")));
    }
    let m = tape.value(mu).data();
    let proj: Vec<Projection> = m.chunks(3).map(|p| project([p[0], p[1], p[2]], camera)).collect();
    let visible: Vec<bool> = proj.iter().map(|p| p.in_frustum).collect();
    let data = proj.iter().flat_map(|p| if p.in_frustum { p.pix } else { [0.0; 2] }).collect();
    let v = tape.custom(&[mu], Tensor::from_parts(vec![s[0], 2], data), ProjectFn { camera: *camera, visible: Arc::new(visible.clone()) });
    Ok((v, visible))
}
