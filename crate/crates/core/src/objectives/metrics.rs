use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::LabelGrid;

fn check_pair(pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
    if pred.spec.dims != gt.spec.dims || pred.labels.len() != gt.labels.len() {
        return Err(Error::shape("metrics", format!("pred dims {:?} vs gt dims {:?}", pred.spec.dims, gt.spec.dims)));
    }
    Ok(())
}

/// Occupied-versus-empty IoU. Both grids empty scores 1.0.
pub fn iou(pred: &LabelGrid, gt: &LabelGrid) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let denom = tp + fp + fnn;
    Ok(if denom == 0 { 1.0 } else { tp as f64 / denom as f64 })
}

/// How classes missing from both grids enter the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Average only over classes present in prediction or ground truth.
    #[default]
    Present,
    /// Average over every semantic class; absent classes score 0.
    Strict,
}

/// Mean per-class IoU over semantic classes `1..C`, plus the per-class
/// values that entered the mean.
pub fn miou(pred: &LabelGrid, gt: &LabelGrid, mode: MiouMode) -> Result<(f64, BTreeMap<u8, f64>)> {
    check_pair(pred, gt)?;
    let c = pred.num_classes.max(gt.num_classes);
    let mut tp = vec![0u64; c];
    let mut fp = vec![0u64; c];
    let mut fnn = vec![0u64; c];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p as usize, g as usize);
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[g] += 1;
        }
    }
    let mut per = BTreeMap::new();
    for k in 1..c {
        let denom = tp[k] + fp[k] + fnn[k];
        if denom > 0 {
            per.insert(k as u8, tp[k] as f64 / denom as f64);
        } else if mode == MiouMode::Strict {
            per.insert(k as u8, 0.0);
        }
    }
    let mean = if per.is_empty() { 1.0 } else { per.values().sum::<f64>() / per.len() as f64 };
    Ok((mean, per))
}

/// Evaluation summary written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub miou: f64,
    pub per_class_iou: BTreeMap<String, f64>,
    pub config_hash: String,
    pub wall_ms: u64,
    /// Additional named scalars (losses, Chamfer distances, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn evaluate(pred: &LabelGrid, gt: &LabelGrid, mode: MiouMode, config_hash: String) -> Result<Self> {
        let iou = iou(pred, gt)?;
        let (miou, per) = miou(pred, gt, mode)?;
        Ok(Self {
            iou,
            miou,
            per_class_iou: per.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            config_hash,
            wall_ms: 0,
            extra: BTreeMap::new(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("report JSON", e.to_string()))
    }
}
