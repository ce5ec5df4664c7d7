use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::world::World;
use crate::error::{Error, Result};
use crate::geometry::{add, dot, scale, Pose, Vec3};

pub const GOPC_MAGIC: &[u8; 4] = b"GOPC";

/// Points with per-point return intensity, expressed in the frame of `pose`
/// (which maps that frame into the world).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub intensity: Vec<f64>,
    pub pose: Pose,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, intensity: Vec<f64>, pose: Pose) -> Result<Self> {
        let pc = Self { points, intensity, pose };
        pc.validate()?;
        Ok(pc)
    }

    /// Cloud with zero intensity everywhere.
    pub fn from_points(points: Vec<Vec3>, pose: Pose) -> Self {
        let intensity = vec![0.0; points.len()];
        Self { points, intensity, pose }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.intensity.len() {
            return Err(Error::Input(format!(
                "point cloud has {} points but {} intensities",
                self.points.len(),
                self.intensity.len()
            )));
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Input(format!("point {i} has non-finite coordinates")));
        }
        if let Some(i) = self.intensity.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!("intensity {} of point {i} outside [0, 1]", self.intensity[i])));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same points expressed in the world frame.
    pub fn to_world(&self) -> PointCloud {
        let points = self.points.iter().map(|&p| self.pose.apply(p)).collect();
        PointCloud { points, intensity: self.intensity.clone(), pose: Pose::identity() }
    }

    pub fn world_points(&self) -> Vec<Vec3> {
        self.points.iter().map(|&p| self.pose.apply(p)).collect()
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(4 + 4 + 28 + 16 * self.len());
        buf.extend_from_slice(GOPC_MAGIC);
        let n = u32::try_from(self.len()).map_err(|_| Error::Input("too many points for GOPC".into()))?;
        buf.extend_from_slice(&n.to_le_bytes());
        let p = &self.pose;
        for v in p.translation.iter().chain(p.rotation.iter()) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for (pt, &i) in self.points.iter().zip(&self.intensity) {
            for v in pt.iter().chain(std::iter::once(&i)) {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_binary(&bytes)
    }

    pub fn decode_binary(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("GOPC", d);
        if bytes.len() < 8 || &bytes[..4] != GOPC_MAGIC {
            return Err(bad("missing GOPC magic"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let want = 8 + 28 + n * 16;
        if bytes.len() != want {
            return Err(bad(&format!("expected {want} bytes for {n} points, found {}", bytes.len())));
        }
        let f = |k: usize| f32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as f64;
        let pose = Pose {
            translation: [f(8), f(12), f(16)],
            rotation: [f(20), f(24), f(28), f(32)],
        };
        let mut points = Vec::with_capacity(n);
        let mut intensity = Vec::with_capacity(n);
        for i in 0..n {
            let o = 36 + 16 * i;
            points.push([f(o), f(o + 4), f(o + 8)]);
            intensity.push(f(o + 12));
        }
        Self::new(points, intensity, pose).map_err(|e| bad(&e.to_string()))
    }

    pub fn write_ascii(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let t = self.pose.translation;
        let q = self.pose.rotation;
        let mut go = || -> std::io::Result<()> {
            writeln!(w, "# x y z intensity")?;
            writeln!(w, "pose: {} {} {} {} {} {} {}", t[0], t[1], t[2], q[0], q[1], q[2], q[3])?;
            for (p, i) in self.points.iter().zip(&self.intensity) {
                writeln!(w, "{} {} {} {}", p[0], p[1], p[2], i)?;
            }
            w.flush()
        };
        go().map_err(|e| Error::io(path, e))
    }

    pub fn parse_ascii(reader: impl Read) -> Result<Self> {
        let bad = |line: usize, d: &str| Error::format("point cloud text", format!("line {line}: {d}"));
        let mut pose = Pose::identity();
        let mut points = Vec::new();
        let mut intensity = Vec::new();
        for (ln, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| bad(ln + 1, &e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse = |s: &str| -> Result<Vec<f64>> {
                s.split_whitespace().map(|t| t.parse::<f64>().map_err(|_| bad(ln + 1, &format!("bad number `{t}`")))).collect()
            };
            if let Some(rest) = line.strip_prefix("pose:") {
                let v = parse(rest)?;
                if v.len() != 7 {
                    return Err(bad(ln + 1, "pose needs 7 numbers"));
                }
                pose = Pose { translation: [v[0], v[1], v[2]], rotation: [v[3], v[4], v[5], v[6]] };
                continue;
            }
            let v = parse(line)?;
            match v.len() {
                3 => intensity.push(0.0),
                4 => intensity.push(v[3]),
                k => return Err(bad(ln + 1, &format!("expected 3 or 4 columns, found {k}"))),
            }
            points.push([v[0], v[1], v[2]]);
        }
        Self::new(points, intensity, pose)
    }

    /// Reads either format, detected by the GOPC magic.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(GOPC_MAGIC) {
            Self::decode_binary(&bytes)
        } else {
            Self::parse_ascii(bytes.as_slice())
        }
    }

    /// Writes text when the extension is `.txt`/`.xyz`, binary otherwise.
    pub fn write(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt" | "xyz") => self.write_ascii(path),
            _ => self.write_binary(path),
        }
    }
}

/// Spinning-sensor ray layout. Angles in radians; elevation 0 is horizontal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPattern {
    pub n_azimuth: usize,
    pub elevations: Vec<f64>,
    pub max_range: f64,
}

impl Default for LidarPattern {
    /// 180 azimuths x 16 beams spread over -30..+5 degrees, 40 m range.
    fn default() -> Self {
        Self::uniform(180, 16, -30.0, 5.0, 40.0)
    }
}

impl LidarPattern {
    /// `n_beams` elevations evenly spaced over `[lo_deg, hi_deg]`.
    pub fn uniform(n_azimuth: usize, n_beams: usize, lo_deg: f64, hi_deg: f64, max_range: f64) -> Self {
        let elevations = (0..n_beams)
            .map(|i| {
                let f = if n_beams > 1 { i as f64 / (n_beams - 1) as f64 } else { 0.5 };
                (lo_deg + f * (hi_deg - lo_deg)).to_radians()
            })
            .collect();
        Self { n_azimuth, elevations, max_range }
    }

    /// Unit ray directions in the sensor frame, azimuth-major.
    pub fn directions(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.n_azimuth * self.elevations.len());
        for a in 0..self.n_azimuth {
            let az = std::f64::consts::TAU * a as f64 / self.n_azimuth as f64;
            for &el in &self.elevations {
                out.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
            }
        }
        out
    }
}

/// Diffuse reflectivity used for synthetic return intensity.
pub fn reflectivity(class_id: u8) -> f64 {
    const TABLE: [f64; 6] = [0.0, 0.35, 0.8, 0.6, 0.95, 0.5];
    TABLE.get(class_id as usize).copied().unwrap_or(0.3 + 0.1 * f64::from(class_id % 7))
}

/// First-hit ray casting from `sensor_pose`. Points are in the sensor frame.
pub fn simulate_lidar(world: &World, sensor_pose: &Pose, pattern: &LidarPattern) -> Result<PointCloud> {
    if !(pattern.max_range > 0.0) {
        return Err(Error::Config(format!("lidar max_range must be > 0, got {}", pattern.max_range)));
    }
    let origin = sensor_pose.translation;
    let hits: Vec<Option<(Vec3, f64)>> = pattern
        .directions()
        .into_par_iter()
        .map(|d| {
            let dw = sensor_pose.rotate(d);
            world.cast(origin, dw, pattern.max_range).map(|(i, h)| {
                let cos = dot(h.normal, dw).abs();
                let inten = (reflectivity(world.primitives[i].class_id) * cos).clamp(0.0, 1.0);
                (scale(d, h.t), inten)
            })
        })
        .collect();
    let (points, intensity) = hits.into_iter().flatten().unzip();
    Ok(PointCloud { points, intensity, pose: *sensor_pose })
}

/// Concatenate sweeps in the world frame.
pub fn aggregate_sweeps(clouds: &[PointCloud]) -> PointCloud {
    let mut points = Vec::with_capacity(clouds.iter().map(PointCloud::len).sum());
    let mut intensity = Vec::with_capacity(points.capacity());
    for c in clouds {
        points.extend(c.world_points());
        intensity.extend_from_slice(&c.intensity);
    }
    PointCloud { points, intensity, pose: Pose::identity() }
}

/// `k` sensor poses at `height`, spaced `step` apart along world x, with the
/// keyframe (index `k / 2`) at the origin.
pub fn sweep_poses(k: usize, step: f64, height: f64) -> Vec<Pose> {
    (0..k)
        .map(|i| Pose::from_translation(add([(i as f64 - (k / 2) as f64) * step, 0.0, 0.0], [0.0, 0.0, height])))
        .collect()
}
