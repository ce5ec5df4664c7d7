use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GridSpec;
use crate::error::{Error, Result};
use crate::geometry::{add, dot, mat_t_vec, mat_vec, quat_axis_angle, scale, sub, Pose, Vec3};
use crate::rng::SeedTree;
use crate::splat::LabelGrid;

/// Class id reserved for free space.
pub const EMPTY_CLASS: u8 = 0;
/// Class id assigned to ground planes by the generator.
pub const GROUND_CLASS: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Oriented box with full side lengths along its local axes.
    Box { size: Vec3 },
    Sphere { radius: f64 },
    /// Infinite horizontal slab whose top surface is at the pose's `z`.
    GroundPlane { thickness: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub pose: Pose,
    pub class_id: u8,
}

/// Ray hit: distance along the (unit) direction and outward surface normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

impl Primitive {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let ok = match self.shape {
            Shape::Box { size } => size.iter().all(|&s| s > 0.0 && s.is_finite()),
            Shape::Sphere { radius } => radius > 0.0 && radius.is_finite(),
            Shape::GroundPlane { thickness } => thickness > 0.0 && thickness.is_finite(),
        };
        if !ok {
            return Err(Error::Input(format!("primitive extents must be > 0: {:?}", self.shape)));
        }
        if self.class_id == EMPTY_CLASS || self.class_id as usize >= num_classes {
            return Err(Error::Input(format!(
                "primitive class {} outside 1..{}",
                self.class_id,
                num_classes.saturating_sub(1)
            )));
        }
        Ok(())
    }

    /// Closed-set membership test.
    pub fn contains(&self, p: Vec3) -> bool {
        match self.shape {
            Shape::Box { size } => {
                let l = self.pose.apply_inverse(p);
                (0..3).all(|a| l[a].abs() <= 0.5 * size[a])
            }
            Shape::Sphere { radius } => {
                let d = sub(p, self.pose.translation);
                dot(d, d) <= radius * radius
            }
            Shape::GroundPlane { thickness } => {
                let top = self.pose.translation[2];
                p[2] <= top && p[2] >= top - thickness
            }
        }
    }

    /// First intersection with `t > t_min` along a unit-direction ray.
    pub fn intersect(&self, origin: Vec3, dir: Vec3, t_min: f64) -> Option<Hit> {
        match self.shape {
            Shape::Box { size } => {
                let r = self.pose.matrix();
                let o = mat_t_vec(&r, sub(origin, self.pose.translation));
                let d = mat_t_vec(&r, dir);
                let half = scale(size, 0.5);
                let (near, far, axis_near, axis_far) = slab(o, d, half)?;
                let (t, axis, sign) = if near > t_min {
                    (near, axis_near.0, axis_near.1)
                } else if far > t_min {
                    (far, axis_far.0, -axis_far.1)
                } else {
                    return None;
                };
                let mut n = [0.0; 3];
                n[axis] = sign;
                Some(Hit { t, normal: mat_vec(&r, n) })
            }
            Shape::Sphere { radius } => {
                let oc = sub(origin, self.pose.translation);
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > t_min {
                    -b - s
                } else if -b + s > t_min {
                    -b + s
                } else {
                    return None;
                };
                let p = add(origin, scale(dir, t));
                Some(Hit { t, normal: scale(sub(p, self.pose.translation), 1.0 / radius) })
            }
            Shape::GroundPlane { thickness } => {
                let top = self.pose.translation[2];
                let bottom = top - thickness;
                if dir[2].abs() < 1e-15 {
                    return None;
                }
                let t_top = (top - origin[2]) / dir[2];
                let t_bot = (bottom - origin[2]) / dir[2];
                let (near, far, n_near) =
                    if t_top < t_bot { (t_top, t_bot, [0.0, 0.0, 1.0]) } else { (t_bot, t_top, [0.0, 0.0, -1.0]) };
                if near > t_min {
                    Some(Hit { t: near, normal: n_near })
                } else if far > t_min {
                    Some(Hit { t: far, normal: scale(n_near, -1.0) })
                } else {
                    None
                }
            }
        }
    }
}

type AxisSign = (usize, f64);

/// Slab intersection against an origin-centered box; returns entry/exit
/// distances with the axis and outward sign of each face.
fn slab(o: Vec3, d: Vec3, half: Vec3) -> Option<(f64, f64, AxisSign, AxisSign)> {
    let mut near = f64::NEG_INFINITY;
    let mut far = f64::INFINITY;
    let mut an = (0, 1.0);
    let mut af = (0, 1.0);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t1 = (-half[a] - o[a]) / d[a];
        let t2 = (half[a] - o[a]) / d[a];
        let (lo, hi, s_lo) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if lo > near {
            near = lo;
            an = (a, s_lo);
        }
        if hi < far {
            far = hi;
            af = (a, -s_lo);
        }
        if near > far {
            return None;
        }
    }
    Some((near, far, an, af))
}

/// Collection of labeled primitives; later entries win overlapping space.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub primitives: Vec<Primitive>,
}

impl World {
    pub fn new(primitives: Vec<Primitive>, num_classes: usize) -> Result<Self> {
        for p in &primitives {
            p.validate(num_classes)?;
        }
        Ok(Self { primitives })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Class of the last primitive containing `p`, or empty.
    pub fn label_at(&self, p: Vec3) -> u8 {
        self.primitives.iter().rev().find(|pr| pr.contains(p)).map_or(EMPTY_CLASS, |pr| pr.class_id)
    }

    /// Nearest hit over all primitives, with the index of the primitive.
    pub fn cast(&self, origin: Vec3, dir: Vec3, max_t: f64) -> Option<(usize, Hit)> {
        let mut best: Option<(usize, Hit)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(h) = p.intersect(origin, dir, 1e-9) {
                if h.t <= max_t && best.is_none_or(|(_, b)| h.t < b.t) {
                    best = Some((i, h));
                }
            }
        }
        best
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("world JSON", e.to_string()))
    }
}

/// Label every voxel by the last primitive containing its center.
pub fn rasterize_ground_truth(world: &World, grid: &GridSpec, num_classes: usize) -> LabelGrid {
    let labels: Vec<u8> = (0..grid.num_voxels()).into_par_iter().map(|i| world.label_at(grid.center_flat(i))).collect();
    LabelGrid { spec: *grid, num_classes, labels }
}

/// Ingredients for a random world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub grounds: usize,
    pub boxes: usize,
    pub spheres: usize,
    /// Objects are placed with centers in `[-r, r]^2`.
    pub region_half_extent: f64,
    /// Box footprint side length range (meters).
    pub box_size: (f64, f64),
    pub box_height: (f64, f64),
    pub sphere_radius: (f64, f64),
    /// Objects keep their footprint out of `|y| < corridor` so the sensor
    /// path along the x axis stays clear.
    pub corridor_half_width: f64,
    pub ground_thickness: f64,
    pub num_classes: usize,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        Self {
            grounds: 1,
            boxes: 4,
            spheres: 2,
            region_half_extent: 7.5,
            box_size: (1.0, 2.5),
            box_height: (1.0, 2.5),
            sphere_radius: (0.5, 1.0),
            corridor_half_width: 1.5,
            ground_thickness: 0.5,
            num_classes: 6,
        }
    }
}

impl FromStr for SceneRecipe {
    type Err = Error;

    /// Parses counts such as `"1 ground + 2 boxes + 1 sphere"`; other fields
    /// keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut r = SceneRecipe { grounds: 0, boxes: 0, spheres: 0, ..Default::default() };
        for term in s.split('+') {
            let mut it = term.split_whitespace();
            let (Some(n), Some(kind), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Config(format!("bad scene recipe term `{}`", term.trim())));
            };
            let n: usize = n.parse().map_err(|_| Error::Config(format!("bad count in `{}`", term.trim())))?;
            match kind {
                "ground" | "grounds" | "plane" | "planes" => r.grounds += n,
                "box" | "boxes" => r.boxes += n,
                "sphere" | "spheres" => r.spheres += n,
                _ => return Err(Error::Config(format!("unknown primitive kind `{kind}`"))),
            }
        }
        Ok(r)
    }
}

impl std::fmt::Display for SceneRecipe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ground + {} boxes + {} spheres", self.grounds, self.boxes, self.spheres)
    }
}

impl SceneRecipe {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let ranges = [("box_size", self.box_size), ("box_height", self.box_height), ("sphere_radius", self.sphere_radius)];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0) || hi < lo {
                return Err(Error::Config(format!("{name} range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
            }
        }
        if !(self.ground_thickness > 0.0) {
            return Err(Error::Config("ground_thickness must be > 0".into()));
        }
        if self.num_classes < 3 {
            return Err(Error::Config("scenes need at least 3 classes (empty, ground, object)".into()));
        }
        let reach = self.region_half_extent + 0.5 * self.box_size.1 * std::f64::consts::SQRT_2;
        let reach = reach.max(self.region_half_extent + self.sphere_radius.1);
        let (lo, hi) = (grid.origin, grid.max_corner());
        let fits_xy = (0..2).all(|a| -reach >= lo[a] && reach <= hi[a]);
        let top = self.box_height.1.max(2.0 * self.sphere_radius.1);
        if !fits_xy || top > hi[2] || lo[2] > 0.0 {
            return Err(Error::Config(format!(
                "scene bounds (+-{reach:.2} m, height {top:.2} m) do not fit the grid {lo:?}..{hi:?}"
            )));
        }
        if self.corridor_half_width >= self.region_half_extent {
            return Err(Error::Config("corridor wider than the placement region".into()));
        }
        Ok(())
    }
}

/// Deterministic random world for `seed`. Ground planes come first so
/// objects win their overlap at rasterization.
pub fn generate_scene(seed: u64, recipe: &SceneRecipe, grid: &GridSpec) -> Result<World> {
    recipe.validate(grid)?;
    if recipe.grounds == 0 {
        return Err(Error::Config("scene recipe needs at least one ground plane".into()));
    }
    let mut rng = SeedTree::new(seed).rng("scene");
    let mut prims = Vec::with_capacity(recipe.grounds + recipe.boxes + recipe.spheres);
    for _ in 0..recipe.grounds {
        prims.push(Primitive {
            shape: Shape::GroundPlane { thickness: recipe.ground_thickness },
            pose: Pose::identity(),
            class_id: GROUND_CLASS,
        });
    }
    let c = recipe.num_classes as u8;
    let sphere_class = c - 1;
    let box_classes: Vec<u8> = if c > 3 { (2..c - 1).collect() } else { vec![2] };
    let r = recipe.region_half_extent;
    let place = |rng: &mut rand_chacha::ChaCha8Rng, half_footprint: f64| -> (f64, f64) {
        loop {
            let x = rng.random_range(-r..=r);
            let y = rng.random_range(-r..=r);
            if y.abs() - half_footprint >= recipe.corridor_half_width {
                return (x, y);
            }
        }
    };
    for _ in 0..recipe.boxes {
        let size = [
            rng.random_range(recipe.box_size.0..=recipe.box_size.1),
            rng.random_range(recipe.box_size.0..=recipe.box_size.1),
            rng.random_range(recipe.box_height.0..=recipe.box_height.1),
        ];
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        let half_diag = 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt();
        let (x, y) = place(&mut rng, half_diag);
        let class_id = box_classes[rng.random_range(0..box_classes.len())];
        prims.push(Primitive {
            shape: Shape::Box { size },
            pose: Pose::new([x, y, 0.5 * size[2]], quat_axis_angle([0.0, 0.0, 1.0], yaw)),
            class_id,
        });
    }
    for _ in 0..recipe.spheres {
        let radius = rng.random_range(recipe.sphere_radius.0..=recipe.sphere_radius.1);
        let (x, y) = place(&mut rng, radius);
        prims.push(Primitive {
            shape: Shape::Sphere { radius },
            pose: Pose::from_translation([x, y, radius]),
            class_id: sphere_class,
        });
    }
    World::new(prims, recipe.num_classes)
}
