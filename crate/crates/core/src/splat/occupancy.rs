use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::GridSpec;

pub const GOCC_MAGIC: &[u8; 4] = b"GOCC";

/// Integer class per voxel, x-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub spec: GridSpec,
    pub num_classes: usize,
    pub labels: Vec<u8>,
}

/// Per-voxel class logits, `logits[v * C + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGrid {
    pub spec: GridSpec,
    pub num_classes: usize,
    pub logits: Vec<f64>,
}

impl LabelGrid {
    pub fn empty(spec: GridSpec, num_classes: usize) -> Self {
        Self { spec, num_classes, labels: vec![0; spec.num_voxels()] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.spec.num_voxels() {
            return Err(Error::Input(format!(
                "label grid has {} voxels, spec needs {}",
                self.labels.len(),
                self.spec.num_voxels()
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::Input(format!("label {l} outside 0..{}", self.num_classes)));
        }
        Ok(())
    }

    pub fn occupied(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

impl LogitGrid {
    pub fn validate(&self) -> Result<()> {
        if self.logits.len() != self.spec.num_voxels() * self.num_classes {
            return Err(Error::Input("logit grid size does not match its spec".into()));
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite occupancy logit".into()));
        }
        Ok(())
    }

    pub fn voxel(&self, v: usize) -> &[f64] {
        &self.logits[v * self.num_classes..(v + 1) * self.num_classes]
    }

    /// Highest-logit class per voxel; ties resolve to the lower class.
    pub fn argmax(&self) -> LabelGrid {
        let labels = self
            .logits
            .chunks(self.num_classes)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelGrid { spec: self.spec, num_classes: self.num_classes, labels }
    }
}

/// Either payload of a GOCC file.
#[derive(Clone, Debug, PartialEq)]
pub enum OccupancyGrid {
    Labels(LabelGrid),
    Logits(LogitGrid),
}

impl OccupancyGrid {
    pub fn spec(&self) -> &GridSpec {
        match self {
            OccupancyGrid::Labels(g) => &g.spec,
            OccupancyGrid::Logits(g) => &g.spec,
        }
    }

    /// Labels as stored, or the argmax of logits.
    pub fn labels(&self) -> LabelGrid {
        match self {
            OccupancyGrid::Labels(g) => g.clone(),
            OccupancyGrid::Logits(g) => g.argmax(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (spec, c, mode) = match self {
            OccupancyGrid::Labels(g) => (g.spec, g.num_classes, 0u8),
            OccupancyGrid::Logits(g) => (g.spec, g.num_classes, 1u8),
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(GOCC_MAGIC);
        for d in spec.dims.iter().chain(std::iter::once(&c)) {
            let d = u32::try_from(*d).map_err(|_| Error::Input("grid dimension exceeds u32".into()))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in spec.origin.iter().chain(std::iter::once(&spec.voxel_size)) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf.push(mode);
        match self {
            OccupancyGrid::Labels(g) => buf.extend_from_slice(&g.labels),
            OccupancyGrid::Logits(g) => {
                for v in &g.logits {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format("GOCC", d);
        const HEADER: usize = 4 + 16 + 16 + 1;
        if bytes.len() < HEADER || &bytes[..4] != GOCC_MAGIC {
            return Err(bad("missing GOCC magic or short header".into()));
        }
        let u = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as usize;
        let f = |k: usize| f32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as f64;
        let dims = [u(4), u(8), u(12)];
        let c = u(16);
        let spec = GridSpec::new([f(20), f(24), f(28)], f(32), dims).map_err(|e| bad(e.to_string()))?;
        if c == 0 || c > 256 {
            return Err(bad(format!("class count {c} outside 1..=256")));
        }
        let n = spec.num_voxels();
        let body = &bytes[HEADER..];
        let grid = match bytes[36] {
            0 => {
                if body.len() != n {
                    return Err(bad(format!("expected {n} label bytes, found {}", body.len())));
                }
                OccupancyGrid::Labels(LabelGrid { spec, num_classes: c, labels: body.to_vec() })
            }
            1 => {
                if body.len() != 4 * n * c {
                    return Err(bad(format!("expected {} logit bytes, found {}", 4 * n * c, body.len())));
                }
                let logits = body
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect();
                OccupancyGrid::Logits(LogitGrid { spec, num_classes: c, logits })
            }
            m => return Err(bad(format!("unknown mode byte {m}"))),
        };
        match &grid {
            OccupancyGrid::Labels(g) => g.validate(),
            OccupancyGrid::Logits(g) => g.validate(),
        }
        .map_err(|e| bad(e.to_string()))?;
        Ok(grid)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
