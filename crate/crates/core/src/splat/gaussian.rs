use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{dot, mat_mul, rot_from_unit_quat, sub, transpose, Mat3, Vec3};

/// Quaternions shorter than this are treated as the identity rotation.
pub const QUAT_EPS: f64 = 1e-8;

/// Rotation matrix of `q = (w, x, y, z)` after renormalization.
pub fn quat_to_rot(q: [f64; 4]) -> Result<Mat3> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > QUAT_EPS) {
        return Err(Error::Input(format!("quaternion {q:?} has no direction")));
    }
    Ok(rot_from_unit_quat(q.map(|v| v / n)))
}

/// `R S S^T R^T`.
pub fn covariance(q: [f64; 4], s: Vec3) -> Result<Mat3> {
    if s.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Input(format!("Gaussian scale must be > 0, got {s:?}")));
    }
    let r = quat_to_rot(q)?;
    let mut rs = r;
    for row in rs.iter_mut() {
        for a in 0..3 {
            row[a] *= s[a] * s[a];
        }
    }
    Ok(mat_mul(&rs, &transpose(&r)))
}

fn inverse3(m: &Mat3) -> Mat3 {
    let c = |i: usize, j: usize| {
        let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
        let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
        m[i1][j1] * m[i2][j2] - m[i1][j2] * m[i2][j1]
    };
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = c(j, i) / det;
        }
    }
    out
}

/// One semantic Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mu: Vec3,
    pub rot: [f64; 4],
    pub scale: Vec3,
    pub sem: Vec<f64>,
}

/// `exp(-0.5 (x - mu)^T Sigma^-1 (x - mu)) * c`, via an explicit inverse.
pub fn gaussian_contribution(x: Vec3, g: &Gaussian) -> Result<Vec<f64>> {
    let inv = inverse3(&covariance(g.rot, g.scale)?);
    let d = sub(x, g.mu);
    let m = dot(d, crate::geometry::mat_vec(&inv, d));
    let w = (-0.5 * m).exp();
    Ok(g.sem.iter().map(|c| w * c).collect())
}

/// Structure-of-arrays Gaussian collection.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub mu: Vec<Vec3>,
    pub rot: Vec<[f64; 4]>,
    pub scale: Vec<Vec3>,
    /// `sem[i * num_classes + c]`
    pub sem: Vec<f64>,
    pub num_classes: usize,
}

pub const PARAM_MU: &str = "gauss.mu";
pub const PARAM_ROT: &str = "gauss.rot";
pub const PARAM_LOG_SCALE: &str = "gauss.log_scale";
pub const PARAM_SEM: &str = "gauss.sem";

impl GaussianSet {
    pub fn empty(num_classes: usize) -> Self {
        Self { mu: vec![], rot: vec![], scale: vec![], sem: vec![], num_classes }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn get(&self, i: usize) -> Gaussian {
        let c = self.num_classes;
        Gaussian { mu: self.mu[i], rot: self.rot[i], scale: self.scale[i], sem: self.sem[i * c..(i + 1) * c].to_vec() }
    }

    pub fn push(&mut self, g: Gaussian) {
        assert_eq!(g.sem.len(), self.num_classes, "semantic vector length");
        self.mu.push(g.mu);
        self.rot.push(g.rot);
        self.scale.push(g.scale);
        self.sem.extend(g.sem);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rot.len() != n || self.scale.len() != n || self.sem.len() != n * self.num_classes {
            return Err(Error::Input("Gaussian arrays disagree in length".into()));
        }
        for i in 0..n {
            let qn = self.rot[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if (qn - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("Gaussian {i} quaternion norm {qn}")));
            }
            if self.scale[i].iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Input(format!("Gaussian {i} scale {:?}", self.scale[i])));
            }
        }
        if self.mu.iter().flatten().chain(&self.sem).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian parameter".into()));
        }
        Ok(())
    }

    /// Reorder by `perm` (new index `k` takes old index `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::empty(self.num_classes);
        for &i in perm {
            out.push(self.get(i));
        }
        out
    }

    /// Trainable view: centers, raw quaternions, log-scales, logits.
    pub fn to_params(&self) -> ParamSet {
        let n = self.len();
        let c = self.num_classes;
        let mut p = ParamSet::new();
        let flat3 = |v: &[Vec3]| v.iter().flatten().copied().collect::<Vec<f64>>();
        let log_s: Vec<f64> = self.scale.iter().flatten().map(|s| s.ln()).collect();
        p.insert(PARAM_MU, Tensor::new(vec![n, 3], flat3(&self.mu)).expect("shape")).expect("fresh name");
        p.insert(PARAM_ROT, Tensor::new(vec![n, 4], self.rot.iter().flatten().copied().collect()).expect("shape"))
            .expect("fresh name");
        p.insert(PARAM_LOG_SCALE, Tensor::new(vec![n, 3], log_s).expect("shape")).expect("fresh name");
        p.insert(PARAM_SEM, Tensor::new(vec![n, c], self.sem.clone()).expect("shape")).expect("fresh name");
        p
    }

    /// Inverse of [`to_params`](Self::to_params); quaternions are renormalized.
    pub fn from_params(p: &ParamSet) -> Result<Self> {
        let get = |name: &str| p.get(name).ok_or_else(|| Error::Input(format!("parameter `{name}` missing")));
        let (mu, rot, ls, sem) = (get(PARAM_MU)?, get(PARAM_ROT)?, get(PARAM_LOG_SCALE)?, get(PARAM_SEM)?);
        let n = mu.shape()[0];
        if mu.shape() != [n, 3] || rot.shape() != [n, 4] || ls.shape() != [n, 3] || sem.shape().first() != Some(&n) {
            return Err(Error::Input("Gaussian parameter shapes disagree".into()));
        }
        let c = if n > 0 { sem.len() / n } else { sem.shape().get(1).copied().unwrap_or(0) };
        let v3 = |t: &Tensor, i: usize| [t.data()[3 * i], t.data()[3 * i + 1], t.data()[3 * i + 2]];
        let mut rots = Vec::with_capacity(n);
        for i in 0..n {
            let q: [f64; 4] = rot.data()[4 * i..4 * i + 4].try_into().expect("4 values");
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            rots.push(if qn > QUAT_EPS { q.map(|v| v / qn) } else { crate::geometry::QUAT_IDENTITY });
        }
        Ok(Self {
            mu: (0..n).map(|i| v3(mu, i)).collect(),
            rot: rots,
            scale: (0..n).map(|i| v3(ls, i).map(f64::exp)).collect(),
            sem: sem.data().to_vec(),
            num_classes: c,
        })
    }
}

/// Renormalize every row of an `[N, 4]` quaternion tensor in place.
pub fn renormalize_quaternions(rot: &mut Tensor) {
    for q in rot.data_mut().chunks_mut(4) {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > QUAT_EPS {
            q.iter_mut().for_each(|v| *v /= n);
        } else {
            q.copy_from_slice(&crate::geometry::QUAT_IDENTITY);
        }
    }
}
