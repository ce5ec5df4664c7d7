use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaf::GafConfig;
use crate::init::InitConfig;
use crate::lcd::{LcdTrainConfig, SampleMode, DEFAULT_BETA0, DEFAULT_BETA_T, DEFAULT_T};
use crate::objectives::{MiouMode, OptimConfig};
use crate::scene::{GridSpec, LidarPattern, SceneRecipe};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarConfig {
    /// Sweeps aggregated into the dense target; the middle one is the scan.
    pub sweeps: usize,
    /// Sensor travel between sweeps along world x, meters.
    pub sweep_step: f64,
    pub sensor_height: f64,
    pub n_azimuth: usize,
    pub beams: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            sweeps: 20,
            sweep_step: 0.5,
            sensor_height: 1.8,
            n_azimuth: 180,
            beams: 16,
            elevation_min_deg: -30.0,
            elevation_max_deg: 5.0,
            max_range: 40.0,
        }
    }
}

impl LidarConfig {
    pub fn pattern(&self) -> LidarPattern {
        LidarPattern::uniform(self.n_azimuth, self.beams, self.elevation_min_deg, self.elevation_max_deg, self.max_range)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub height: f64,
    /// Downward tilt in degrees.
    pub pitch_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { size: 256, height: 1.5, pitch_deg: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LcdConfig {
    /// Off feeds the raw scan to initialization.
    pub enabled: bool,
    pub t: usize,
    pub beta0: f64,
    pub beta_t: f64,
    pub steps: usize,
    pub mode: SampleMode,
    /// Generated points; 0 means four times the scan size.
    pub n_out: usize,
    /// Keep the scan points next to the generated ones in the completed cloud.
    pub keep_input: bool,
    pub train: LcdTrainConfig,
}

impl Default for LcdConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            t: DEFAULT_T,
            beta0: DEFAULT_BETA0,
            beta_t: DEFAULT_BETA_T,
            steps: 50,
            mode: SampleMode::Deterministic,
            n_out: 0,
            keep_input: true,
            train: LcdTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub optim: OptimConfig,
    /// Splat cutoff in units of the largest Gaussian scale.
    pub radius_multiplier: f64,
    /// Learning-rate multiplier for the Gaussians' own attributes.
    pub gaussian_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            optim: OptimConfig { lr: 5e-3, lr_min: 1e-5, warmup_iters: 50, total_iters: 500, ..OptimConfig::default() },
            radius_multiplier: 3.0,
            gaussian_lr_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub miou_mode: MiouMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub out_dir: String,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { out_dir: "run".into() }
    }
}

/// Every knob of a pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub scene: SceneRecipe,
    pub lidar: LidarConfig,
    pub cameras: CameraConfig,
    pub lcd: LcdConfig,
    pub init: InitConfig,
    pub gaf: GafConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridSpec::desk(),
            scene: SceneRecipe::default(),
            lidar: LidarConfig::default(),
            cameras: CameraConfig::default(),
            lcd: LcdConfig::default(),
            init: InitConfig::default(),
            gaf: GafConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

/// Short names accepted in config files and overrides.
const ALIASES: &[(&str, &str)] = &[
    ("num_classes", "scene.num_classes"),
    ("lidar.K", "lidar.sweeps"),
    ("lcd.T", "lcd.t"),
    ("lcd.n_steps", "lcd.steps"),
    ("init.N_G", "init.num_gaussians"),
    ("init.R_d", "init.radius"),
    ("gaf.M", "gaf.codewords"),
    ("gaf.N_off", "gaf.n_off"),
    ("gaf.R", "gaf.radii"),
    ("gaf.k", "gaf.k_geo"),
    ("gaf.T_p", "gaf.max_points_per_voxel"),
    ("train.lr", "train.optim.lr"),
    ("train.warmup", "train.optim.warmup_iters"),
    ("train.total_iters", "train.optim.total_iters"),
    ("train.weight_decay", "train.optim.weight_decay"),
];

/// Keys left out of the hash: they move files, not numbers.
const UNHASHED_PREFIX: &str = "paths.";

fn canonical_key(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, k)| k)
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => out.push((prefix.to_string(), "none".into())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Parse `text` as a value of the same kind as `like`.
fn parse_like(like: &Value, text: &str, key: &str) -> Result<Value> {
    let bad = || Error::Config(format!("cannot read `{text}` as a value for `{key}`"));
    let t = text.trim();
    if matches!(like, Value::Number(_)) && matches!(t, "none" | "null") {
        return Ok(Value::Null);
    }
    Ok(match like {
        Value::Bool(_) => Value::Bool(t.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            Value::Number(t.parse::<i64>().map_err(|_| bad())?.into())
        }
        Value::Number(_) => serde_json::Number::from_f64(t.parse::<f64>().map_err(|_| bad())?).map(Value::Number).ok_or_else(bad)?,
        Value::String(_) => Value::String(t.trim_matches('"').to_string()),
        Value::Array(items) => {
            let inner = t.trim_start_matches('[').trim_end_matches(']');
            let proto = items.first().cloned().unwrap_or(Value::Number(0.into()));
            let parts: Vec<&str> = inner.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            Value::Array(parts.into_iter().map(|p| parse_like(&proto, p, key)).collect::<Result<_>>()?)
        }
        // optional numbers: `none` clears them
        Value::Null => match t {
            "none" | "null" => Value::Null,
            _ => serde_json::Number::from_f64(t.parse::<f64>().map_err(|_| bad())?).map(Value::Number).ok_or_else(bad)?,
        },
        Value::Object(_) => return Err(Error::Config(format!("`{key}` names a section, not a value"))),
    })
}

impl RunConfig {
    /// Dotted keys with their canonical text values, sorted by key.
    pub fn flat(&self) -> Vec<(String, String)> {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        out.sort();
        out
    }

    /// One `key = value` line per setting, sorted.
    pub fn canonical(&self) -> String {
        self.flat().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the canonical form, paths excluded, as hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.flat() {
            if !k.starts_with(UNHASHED_PREFIX) {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Apply `key = value` overrides in order, then validate.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for (key, text) in pairs {
            let key = canonical_key(key.trim());
            let mut node = &mut v;
            for part in key.split('.') {
                node = node.get_mut(part).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *node = parse_like(node, text, key)?;
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        Self::default().with_overrides(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn num_classes(&self) -> usize {
        self.scene.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.scene.validate(&self.grid)?;
        if self.lidar.sweeps == 0 || self.lidar.n_azimuth == 0 || self.lidar.beams == 0 {
            return Err(Error::Config("lidar needs at least one sweep, azimuth and beam".into()));
        }
        if !(self.lidar.max_range > 0.0) {
            return Err(Error::Config("lidar.max_range must be > 0".into()));
        }
        if self.cameras.size == 0 {
            return Err(Error::Config("cameras.size must be >= 1".into()));
        }
        crate::gaf::check_strides(&self.gaf.strides, self.cameras.size, self.cameras.size)?;
        if self.lcd.steps == 0 || self.lcd.steps > self.lcd.t {
            return Err(Error::Config(format!("lcd.steps must lie in 1..={}", self.lcd.t)));
        }
        self.init.validate()?;
        self.gaf.validate()?;
        self.train.optim.validate()?;
        if !(self.train.radius_multiplier > 0.0) || !(self.train.gaussian_lr_scale >= 0.0) {
            return Err(Error::Config("train.radius_multiplier must be > 0 and gaussian_lr_scale >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn overrides_and_aliases() {
        let cfg = RunConfig::parse("# desk run\ngaf.M = 8\nseed=3\ngaf.strides = 4, 8\ngaf.radii = [2, 1.5]\ngaf.delta_max = none\nlcd.mode = ancestral\n").unwrap();
        assert_eq!(cfg.gaf.codewords, 8);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.gaf.strides, vec![4, 8]);
        assert_eq!(cfg.gaf.radii, vec![2.0, 1.5]);
        assert_eq!(cfg.gaf.delta_max, None);
        assert_eq!(cfg.lcd.mode, SampleMode::Ancestral);
        let back = cfg.with_overrides([("gaf.delta_max", "1.5")]).unwrap();
        assert_eq!(back.gaf.delta_max, Some(1.5));
        assert_ne!(back.hash(), cfg.hash());
    }

    #[test]
    fn paths_do_not_change_the_hash() {
        let a = RunConfig::default();
        let b = a.with_overrides([("paths.out_dir", "elsewhere")]).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("gaf.nope = 1").is_err());
        assert!(RunConfig::parse("seed = banana").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("gaf = 3").is_err());
        assert!(RunConfig::parse("init.density_fraction = 1.5").is_err());
        assert!(RunConfig::parse("gaf.strides = 4, 6").is_err());
    }
}
