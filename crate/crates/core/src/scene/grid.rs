use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Axis-aligned voxel lattice. `origin` is the minimum corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: Vec3, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        let g = Self { origin, voxel_size, dims };
        g.validate()?;
        Ok(g)
    }

    /// 40 x 40 x 8 voxels of 0.5 m, centered on the ego in x/y, with the
    /// lowest voxel layer centered on the ground surface `z = 0`.
    pub fn desk() -> Self {
        Self { origin: [-10.0, -10.0, -0.25], voxel_size: 0.5, dims: [40, 40, 8] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::Config(format!("voxel_size must be > 0, got {}", self.voxel_size)));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("grid dims must be >= 1, got {:?}", self.dims)));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Flat x-major index: `z` varies fastest.
    pub fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unflat(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        let x = i / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn center(&self, idx: [usize; 3]) -> Vec3 {
        std::array::from_fn(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.voxel_size)
    }

    pub fn center_flat(&self, i: usize) -> Vec3 {
        self.center(self.unflat(i))
    }

    /// Integer voxel coordinate containing `p`, unbounded.
    pub fn coord_of(&self, p: Vec3) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.voxel_size).floor() as i64)
    }

    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let c = self.coord_of(p);
        if (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < self.dims[a]) {
            Some(c.map(|v| v as usize))
        } else {
            None
        }
    }

    pub fn max_corner(&self) -> Vec3 {
        std::array::from_fn(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size)
    }
}
