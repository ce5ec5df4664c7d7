//! Uniform hash grid over 3D points for radius and k-nearest queries.

use rustc_hash::FxHashMap as HashMap;

use crate::geometry::{dist2, Vec3};

pub struct HashGrid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    points: Vec<Vec3>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl HashGrid {
    /// Build over `points` with cubic cells of edge `cell` (> 0).
    pub fn new(points: &[Vec3], cell: f64) -> Self {
        assert!(cell > 0.0, "hash grid cell size must be positive");
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::default();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = Self::key_of(cell, *p);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i as u32);
        }
        Self { cell, cells, points: points.to_vec(), lo, hi }
    }

    fn key_of(cell: f64, p: Vec3) -> [i64; 3] {
        [(p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64, (p[2] / cell).floor() as i64]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Visit every point with `|p - q| <= r`, in no particular order.
    pub fn for_each_within(&self, q: Vec3, r: f64, mut f: impl FnMut(usize, f64)) {
        if self.points.is_empty() {
            return;
        }
        let r2 = r * r;
        let a = Self::key_of(self.cell, [q[0] - r, q[1] - r, q[2] - r]);
        let b = Self::key_of(self.cell, [q[0] + r, q[1] + r, q[2] + r]);
        for x in a[0].max(self.lo[0])..=b[0].min(self.hi[0]) {
            for y in a[1].max(self.lo[1])..=b[1].min(self.hi[1]) {
                for z in a[2].max(self.lo[2])..=b[2].min(self.hi[2]) {
                    if let Some(ids) = self.cells.get(&[x, y, z]) {
                        for &i in ids {
                            let d2 = dist2(self.points[i as usize], q);
                            if d2 <= r2 {
                                f(i as usize, d2);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Indices of points with `|p - q| <= r`, ascending.
    pub fn within(&self, q: Vec3, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(q, r, |i, _| out.push(i));
        out.sort_unstable();
        out
    }

    pub fn count_within(&self, q: Vec3, r: f64) -> usize {
        let mut n = 0;
        self.for_each_within(q, r, |_, _| n += 1);
        n
    }

    /// The `k` nearest points as `(index, squared distance)`, sorted by
    /// distance then index.
    pub fn knn(&self, q: Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let c = Self::key_of(self.cell, q);
        let max_ring = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut found: Vec<(usize, f64)> = Vec::new();
        for ring in 0..=max_ring {
            for x in c[0] - ring..=c[0] + ring {
                for y in c[1] - ring..=c[1] + ring {
                    for z in c[2] - ring..=c[2] + ring {
                        let on_shell =
                            (x - c[0]).abs() == ring || (y - c[1]).abs() == ring || (z - c[2]).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[x, y, z]) {
                            found.extend(ids.iter().map(|&i| (i as usize, dist2(self.points[i as usize], q))));
                        }
                    }
                }
            }
            if found.len() >= k {
                found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                // anything outside the visited cube is at least `ring * cell` away
                let bound = ring as f64 * self.cell;
                if found[k - 1].1 <= bound * bound {
                    found.truncate(k);
                    return found;
                }
            }
        }
        found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        found.truncate(k);
        found
    }
}
