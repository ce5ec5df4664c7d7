//! Small fixed-size vector, quaternion and rigid-transform helpers.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// `m^T v`
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`; no normalization.
pub fn rot_from_unit_quat(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn quat_conj(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Quaternion for a rotation of `angle` radians about a unit `axis`.
pub fn quat_axis_angle(axis: Vec3, angle: f64) -> [f64; 4] {
    let (s, c) = (0.5 * angle).sin_cos();
    [c, axis[0] * s, axis[1] * s, axis[2] * s]
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix, with `w >= 0`.
pub fn quat_from_rot(m: &Mat3) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = q.map(|v| v / n);
    if q[0] < 0.0 { q.map(|v| -v) } else { q }
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub const QUAT_IDENTITY: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

/// Rigid transform mapping local coordinates to the parent frame:
/// `p_parent = R(rotation) p_local + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: Vec3,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { translation: [0.0; 3], rotation: QUAT_IDENTITY }
    }

    pub fn new(translation: Vec3, rotation: [f64; 4]) -> Self {
        let n = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rotation = if n > 0.0 { rotation.map(|v| v / n) } else { QUAT_IDENTITY };
        Self { translation, rotation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { translation, rotation: QUAT_IDENTITY }
    }

    pub fn matrix(&self) -> Mat3 {
        rot_from_unit_quat(self.rotation)
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.matrix(), p), self.translation)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.matrix(), v)
    }

    pub fn apply_inverse(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.matrix(), sub(p, self.translation))
    }

    pub fn inverse(&self) -> Pose {
        let q = quat_conj(self.rotation);
        let t = scale(mat_vec(&rot_from_unit_quat(q), self.translation), -1.0);
        Pose { translation: t, rotation: q }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.apply(other.translation), quat_mul(self.rotation, other.rotation))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip() {
        let p = Pose::new([1.0, -2.0, 0.5], quat_axis_angle([0.0, 0.6, 0.8], 0.7));
        let x = [0.3, 0.2, -1.1];
        let back = p.apply_inverse(p.apply(x));
        let via_inv = p.inverse().apply(p.apply(x));
        for i in 0..3 {
            assert!((back[i] - x[i]).abs() < 1e-12);
            assert!((via_inv[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn quat_from_rot_inverts_rot_from_quat() {
        for (axis, angle) in [([0.0, 0.0, 1.0], 0.3), ([1.0, 0.0, 0.0], 3.0), ([0.0, 0.6, 0.8], -2.9), ([0.0, 1.0, 0.0], 3.1)] {
            let q = quat_axis_angle(axis, angle);
            let q = if q[0] < 0.0 { q.map(|v| -v) } else { q };
            let back = quat_from_rot(&rot_from_unit_quat(q));
            for i in 0..4 {
                assert!((back[i] - q[i]).abs() < 1e-12, "{q:?} vs {back:?}");
            }
        }
    }

    #[test]
    fn compose_matches_sequential_application() {
        let a = Pose::new([1.0, 0.0, 0.0], quat_axis_angle([0.0, 0.0, 1.0], 0.4));
        let b = Pose::new([0.0, 2.0, 1.0], quat_axis_angle([1.0, 0.0, 0.0], -0.3));
        let x = [0.5, -0.5, 2.0];
        let lhs = a.compose(&b).apply(x);
        let rhs = a.apply(b.apply(x));
        for i in 0..3 {
            assert!((lhs[i] - rhs[i]).abs() < 1e-12);
        }
    }
}
