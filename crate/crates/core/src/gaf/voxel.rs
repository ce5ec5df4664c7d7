use rustc_hash::FxHashMap as HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::ops::{sparse_conv, NeighborTable, VoxelIndex};
use crate::autodiff::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scene::GridSpec;

/// Width of the raw per-point embedding: voxel-relative xyz, intensity, 1.
pub const PSI_DIM: usize = 5;

/// Occupied voxels with one feature row each, sorted by voxel coordinate.
#[derive(Clone, Debug)]
pub struct SparseVoxelGrid {
    pub index: VoxelIndex,
    /// `[occupied, dim]`
    pub features: Tensor,
    pub table: NeighborTable,
}

impl SparseVoxelGrid {
    pub fn len(&self) -> usize {
        self.index.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.last_dim()
    }

    pub fn feature(&self, coord: [usize; 3]) -> Option<&[f64]> {
        let d = self.dim();
        self.index.row(coord).map(|r| &self.features.data()[r * d..(r + 1) * d])
    }
}

/// `[(p - center) / voxel_size, intensity, 1]`.
pub fn psi(p: Vec3, intensity: f64, spec: &GridSpec, voxel: [usize; 3]) -> [f64; PSI_DIM] {
    let c = spec.center(voxel);
    let h = spec.voxel_size;
    [(p[0] - c[0]) / h, (p[1] - c[1]) / h, (p[2] - c[2]) / h, intensity, 1.0]
}

/// Average the embeddings of the first `max_points` points of each voxel
/// (insertion order) and zero-pad them to `dim`. Points outside the grid are
/// dropped.
pub fn voxelize(points: &[Vec3], intensity: &[f64], spec: &GridSpec, max_points: usize, dim: usize) -> Result<SparseVoxelGrid> {
    if max_points == 0 {
        return Err(Error::Config("points per voxel must be >= 1".into()));
    }
    if dim < PSI_DIM {
        return Err(Error::Config(format!("voxel feature width must be >= {PSI_DIM}, got {dim}")));
    }
    if intensity.len() != points.len() {
        return Err(Error::shape("voxelize", format!("{} points vs {} intensities", points.len(), intensity.len())));
    }
    let mut acc: HashMap<[usize; 3], ([f64; PSI_DIM], usize)> = HashMap::default();
    for (p, &i) in points.iter().zip(intensity) {
        let Some(v) = spec.voxel_of(*p) else { continue };
        let e = acc.entry(v).or_insert(([0.0; PSI_DIM], 0));
        if e.1 < max_points {
            for (a, x) in e.0.iter_mut().zip(psi(*p, i, spec, v)) {
                *a += x;
            }
            e.1 += 1;
        }
    }
    let mut coords: Vec<[usize; 3]> = acc.keys().copied().collect();
    coords.sort_unstable();
    let mut data = vec![0.0; coords.len() * dim];
    for (r, c) in coords.iter().enumerate() {
        let (sum, n) = acc[c];
        for a in 0..PSI_DIM {
            data[r * dim + a] = sum[a] / n as f64;
        }
    }
    let table = NeighborTable::new(&coords);
    Ok(SparseVoxelGrid { index: VoxelIndex::new(*spec, coords.clone()), features: Tensor::from_parts(vec![coords.len(), dim], data), table })
}

pub const ENCODER_LAYERS: usize = 2;

/// Parameter names and shapes of the voxel encoder.
pub fn encoder_layout(dim: usize) -> Vec<(String, Vec<usize>)> {
    (1..=ENCODER_LAYERS)
        .flat_map(|l| [(format!("enc.conv{l}.w"), vec![27 * dim, dim]), (format!("enc.conv{l}.b"), vec![dim])])
        .collect()
}

pub fn init_encoder(params: &mut ParamSet, dim: usize, rng: &mut impl Rng) -> Result<()> {
    for (name, shape) in encoder_layout(dim) {
        let n: usize = shape.iter().product();
        let t = if shape.len() == 2 {
            let sd = (1.0 / shape[0] as f64).sqrt();
            Tensor::from_parts(shape, (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, t)?;
    }
    Ok(())
}

/// Two submanifold convolutions with GELU. `w` holds the encoder weights in
/// layout order.
pub fn sparse_encode(tape: &mut Tape, grid: &SparseVoxelGrid, x: Var, w: &[Var]) -> Result<Var> {
    if w.len() != 2 * ENCODER_LAYERS {
        return Err(Error::shape("sparse_encode", format!("{} weight tensors", w.len())));
    }
    let mut h = x;
    for l in 0..ENCODER_LAYERS {
        let z = sparse_conv(tape, &grid.table, h, w[2 * l], w[2 * l + 1])?;
        h = tape.gelu(z);
    }
    Ok(h)
}

/// Value-level encoder output for a bound parameter set.
pub fn encode_values(grid: &SparseVoxelGrid, params: &ParamSet) -> Result<SparseVoxelGrid> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let w = encoder_vars(params, &bound)?;
    let x = tape.constant(grid.features.clone());
    let y = sparse_encode(&mut tape, grid, x, &w)?;
    Ok(SparseVoxelGrid { features: tape.value(y).clone(), ..grid.clone() })
}

pub(crate) fn encoder_vars(params: &ParamSet, bound: &BoundParams) -> Result<Vec<Var>> {
    encoder_layout(0)
        .into_iter()
        .map(|(name, _)| {
            params.index_of(&name).map(|i| bound.var(i)).ok_or_else(|| Error::Input(format!("missing parameter {name}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn voxel_center_point() {
        let spec = GridSpec::new([0.0; 3], 0.5, [4, 4, 4]).unwrap();
        let g = voxelize(&[[0.75, 0.25, 1.25]], &[0.0], &spec, 10, 8).unwrap();
        assert_eq!(g.index.coords, vec![[1, 0, 2]]);
        assert_eq!(g.feature([1, 0, 2]).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cap_on_identical_points() {
        let spec = GridSpec::new([0.0; 3], 1.0, [2, 2, 2]).unwrap();
        let p = [0.3, 0.6, 0.9];
        let one = voxelize(&[p], &[0.4], &spec, 10, 5).unwrap();
        let many = voxelize(&[p; 15], &[0.4; 15], &spec, 10, 5).unwrap();
        for (a, b) in one.features.data().iter().zip(many.features.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // the cap keeps the first points in insertion order
        let mut pts = vec![[0.5, 0.5, 0.5]; 2];
        pts.push([0.9, 0.9, 0.9]);
        let g = voxelize(&pts, &[0.0, 0.0, 1.0], &spec, 2, 5).unwrap();
        assert_eq!(g.feature([0, 0, 0]).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(voxelize(&pts, &[0.0; 3], &spec, 0, 5).is_err());
        assert!(voxelize(&pts, &[0.0; 3], &spec, 1, 4).is_err());
    }

    #[test]
    fn occupied_set_matches_floor_division() {
        let spec = GridSpec::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<Vec3> = (0..3000).map(|_| [rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0), rng.random_range(-1.0..5.0)]).collect();
        let g = voxelize(&pts, &vec![0.5; pts.len()], &spec, 10, 8).unwrap();
        let mut want: Vec<[usize; 3]> = pts
            .iter()
            .filter_map(|p| {
                let c: Vec<i64> = (0..3).map(|a| ((p[a] - spec.origin[a]) / spec.voxel_size).floor() as i64).collect();
                let ok = (0..3).all(|a| c[a] >= 0 && c[a] < spec.dims[a] as i64);
                ok.then(|| [c[0] as usize, c[1] as usize, c[2] as usize])
            })
            .collect();
        want.sort_unstable();
        want.dedup();
        assert_eq!(g.index.coords, want);
        for r in g.features.data().chunks(8) {
            assert!(r[..3].iter().all(|v| v.abs() <= 0.5));
        }
    }

    #[test]
    fn encoder_runs_and_preserves_sites() {
        let spec = GridSpec::new([0.0; 3], 1.0, [4, 4, 4]).unwrap();
        let g = voxelize(&[[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [3.5, 3.5, 3.5]], &[0.1, 0.2, 0.3], &spec, 10, 6).unwrap();
        let mut p = ParamSet::new();
        init_encoder(&mut p, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let e = encode_values(&g, &p).unwrap();
        assert_eq!(e.features.shape(), &[3, 6]);
        assert!(e.features.all_finite());
        assert_eq!(e.index.coords, g.index.coords);
    }
}
