use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::world::World;
use crate::error::{Error, Result};
use crate::geometry::{cross, mat_t_vec, mat_vec, normalize, quat_from_rot, Pose, Vec3};

/// Pinhole camera. `extrinsics` maps world points into the camera frame,
/// which looks down `+z` with `x` right and `y` down. Pixel `(u, v)` is a
/// continuous coordinate with the center of pixel `(i, j)` at
/// `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsics: Pose,
    pub width: usize,
    pub height: usize,
}

/// Smallest depth treated as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-3;

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("camera focal lengths must be > 0, got {} {}", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera at `position` looking along `yaw` (about world z, from +x)
    /// tilted down by `pitch`, with principal point at the image center.
    pub fn looking(position: Vec3, yaw: f64, pitch: f64, focal: f64, width: usize, height: usize) -> Self {
        let fwd = [yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin()];
        let right = normalize(cross(fwd, [0.0, 0.0, 1.0]));
        let down = cross(fwd, right);
        // columns are the camera axes in world coordinates
        let cam_to_world = [
            [right[0], down[0], fwd[0]],
            [right[1], down[1], fwd[1]],
            [right[2], down[2], fwd[2]],
        ];
        let c2w = Pose::new(position, quat_from_rot(&cam_to_world));
        Self {
            fx: focal,
            fy: focal,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            extrinsics: c2w.inverse(),
            width,
            height,
        }
    }

    /// Point in the camera frame.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.extrinsics.apply(p)
    }

    /// Continuous pixel coordinates and depth, or `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= MIN_DEPTH {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    pub fn center(&self) -> Vec3 {
        self.extrinsics.inverse().translation
    }

    /// World-frame unit ray through continuous pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let d = normalize([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]);
        let r = self.extrinsics.matrix();
        (self.center(), mat_t_vec(&r, d))
    }
}

/// Four outward cameras (front, left, back, right) at `position`, each with
/// a 90 degree horizontal field of view.
pub fn default_cameras(position: Vec3, size: usize, pitch_deg: f64) -> Vec<Camera> {
    (0..4)
        .map(|i| {
            let yaw = i as f64 * std::f64::consts::FRAC_PI_2;
            Camera::looking(position, yaw, pitch_deg.to_radians(), 0.5 * size as f64, size, size)
        })
        .collect()
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![[0.0; 3]; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.pixels.len() * 3 + 32);
        write!(buf, "P6\n{} {}\n255\n", self.width, self.height).expect("write to vec");
        for p in &self.pixels {
            buf.extend(p.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Fixed per-class color. Class 0 is black.
pub fn palette(class_id: u8) -> [f64; 3] {
    const TABLE: [[f64; 3]; 8] = [
        [0.0, 0.0, 0.0],
        [0.55, 0.55, 0.5],
        [0.9, 0.25, 0.2],
        [0.2, 0.75, 0.3],
        [0.25, 0.4, 0.95],
        [0.95, 0.85, 0.2],
        [0.8, 0.3, 0.85],
        [0.2, 0.85, 0.85],
    ];
    if class_id == 0 {
        return TABLE[0];
    }
    TABLE[1 + (class_id as usize - 1) % 7]
}

/// Brightness factor for a surface at distance `depth`.
pub fn depth_shade(depth: f64) -> f64 {
    1.0 / (1.0 + 0.05 * depth)
}

/// Ray cast through every pixel center. `max_stride` is the coarsest
/// feature stride that must divide the image dimensions.
pub fn render_views(world: &World, cameras: &[Camera], max_stride: usize) -> Result<Vec<Image>> {
    cameras
        .iter()
        .map(|cam| {
            cam.validate()?;
            if max_stride == 0 || cam.width % max_stride != 0 || cam.height % max_stride != 0 {
                return Err(Error::Config(format!(
                    "image size {}x{} not divisible by stride {max_stride}",
                    cam.width, cam.height
                )));
            }
            let pixels = (0..cam.width * cam.height)
                .into_par_iter()
                .map(|i| {
                    let (u, v) = ((i % cam.width) as f64 + 0.5, (i / cam.width) as f64 + 0.5);
                    let (o, d) = cam.ray(u, v);
                    match world.cast(o, d, f64::INFINITY) {
                        Some((k, h)) => {
                            let depth = h.t * mat_vec(&cam.extrinsics.matrix(), d)[2];
                            let s = depth_shade(depth);
                            palette(world.primitives[k].class_id).map(|c| c * s)
                        }
                        None => [0.0; 3],
                    }
                })
                .collect();
            Ok(Image { width: cam.width, height: cam.height, pixels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{add, scale};
    use crate::scene::world::{Primitive, Shape};

    #[test]
    fn projection_and_ray_are_inverse() {
        let cam = Camera::looking([0.0, 0.0, 1.5], 0.7, 0.2, 128.0, 256, 256);
        cam.validate().unwrap();
        for (u, v) in [(10.5, 20.5), (128.0, 128.0), (250.0, 3.0)] {
            let (o, d) = cam.ray(u, v);
            let p = add(o, scale(d, 4.0));
            let (pu, pv, _) = cam.project(p).unwrap();
            assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_camera_axes() {
        let cam = Camera::looking([0.0; 3], 0.0, 0.0, 100.0, 64, 64);
        // straight ahead lands on the principal point; +y world is to the left
        let (u, v, z) = cam.project([5.0, 0.0, 0.0]).unwrap();
        assert!((u - 32.0).abs() < 1e-12 && (v - 32.0).abs() < 1e-12 && (z - 5.0).abs() < 1e-12);
        let (u, _, _) = cam.project([5.0, 1.0, 0.0]).unwrap();
        assert!(u < 32.0);
        let (_, v, _) = cam.project([5.0, 0.0, 1.0]).unwrap();
        assert!(v < 32.0);
        assert!(cam.project([-5.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn empty_world_renders_black() {
        let cams = default_cameras([0.0, 0.0, 1.5], 64, 10.0);
        let imgs = render_views(&World::default(), &cams, 32).unwrap();
        assert_eq!(imgs.len(), 4);
        assert!(imgs.iter().all(|im| im.pixels.iter().all(|p| *p == [0.0; 3])));
        assert!(render_views(&World::default(), &cams, 48).is_err());
    }

    #[test]
    fn pixel_color_matches_palette_at_known_point() {
        let wall = Primitive {
            shape: Shape::Box { size: [1.0, 20.0, 20.0] },
            pose: Pose::from_translation([6.0, 0.0, 0.0]),
            class_id: 3,
        };
        let world = World::new(vec![wall], 6).unwrap();
        let cam = Camera::looking([0.0; 3], 0.0, 0.0, 32.0, 64, 64);
        let img = &render_views(&world, &[cam], 32).unwrap()[0];
        // every ray hits the wall face at x = 5.5, so depth is 5.5 everywhere
        for (x, y) in [(0, 0), (32, 32), (63, 10)] {
            let want = palette(3).map(|c| c * depth_shade(5.5));
            let got = img.at(x, y);
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() < 1e-12);
            }
        }
    }
}
