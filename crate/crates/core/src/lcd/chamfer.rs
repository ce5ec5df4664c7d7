use rayon::prelude::*;

use crate::geometry::Vec3;
use crate::spatial::HashGrid;

/// Mean distance from each point of `a` to its nearest point in `b`.
pub fn directed_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    if b.is_empty() {
        return f64::INFINITY;
    }
    let grid = HashGrid::new(b, 0.5);
    let total: f64 = a.par_iter().map(|p| grid.knn(*p, 1)[0].1.sqrt()).sum();
    total / a.len() as f64
}

/// Symmetric Chamfer distance: average of both directed mean
/// nearest-neighbor distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    0.5 * (directed_chamfer(a, b) + directed_chamfer(b, a))
}
