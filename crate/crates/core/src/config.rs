//! Run configuration and its flat `key = value` text form.
//!
//! Keys are dotted paths into [`RunConfig`] (`world.tail.alpha = 2.0`),
//! `#` starts a comment, list values are comma separated. Every key must
//! name an existing field; values take the type of the field's default.
//! `world_config` and `model_config` name files whose keys are read first,
//! prefixed with `world.` / `model.` when not already.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::datagen::{AugmentConfig, WorldConfig};
use crate::model::{BackboneConfig, HeadKind, QuantileLevels};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}:{line}: {reason}")]
    Syntax { file: String, line: usize, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    Value { key: String, value: String, expected: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Contingency thresholds: mm/day values or oracle-relative `T95`,
    /// `T99`, `T999` (marginal oracle quantile at 0.95, 0.99, 0.999).
    pub thresholds: Vec<String>,
    pub wet_threshold_mm: f64,
    pub interval_lower: f64,
    pub interval_upper: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: ["5", "10", "20", "50", "T95", "T99", "T999"].map(String::from).to_vec(),
            wet_threshold_mm: 1.0,
            interval_lower: 0.5,
            interval_upper: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ratios: vec![0.0, 0.0067, 0.015, 0.021],
        }
    }
}

/// Everything a gen/train/eval/factorial run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Samples generated by `gen` (train + test).
    pub n: usize,
    /// Existing dataset directory; when unset, commands that need data
    /// generate it in memory from `world`.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub model: BackboneConfig,
    /// Quantile head used by `train` and by the quantile arm of
    /// `factorial`/`aug-sweep`.
    pub head: HeadKind,
    pub levels: QuantileLevels,
    /// Training seeds; `train`/`eval` use the first, the comparison
    /// commands run every seed.
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 2500,
            data: None,
            out: PathBuf::from("runs"),
            world: WorldConfig::default(),
            model: BackboneConfig::default(),
            head: HeadKind::IncrementSeparate,
            levels: QuantileLevels::default(),
            seeds: vec![1],
            train: TrainConfig::default(),
            augment: AugmentConfig {
                ratio: 0.0067,
                ..AugmentConfig::default()
            },
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Keys not settable from text: the training seed comes from `seeds`.
const HIDDEN: &[&str] = &["train.seed"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        if self.n == 0 {
            return Err(ConfigError::Invalid("n must be positive".into()));
        }
        if let Some(d) = &self.data {
            if !d.is_dir() {
                return Err(ConfigError::Invalid(format!("dataset directory {} does not exist", d.display())));
            }
        }
        self.world.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.in_channels != self.world.channels {
            return Err(ConfigError::Invalid(format!(
                "model expects {} input channels, world has {}",
                self.model.in_channels, self.world.channels
            )));
        }
        if self.model.upsample != self.world.upsample {
            return Err(ConfigError::Invalid(format!(
                "model upsamples by {:?}, world by {:?}",
                self.model.upsample, self.world.upsample
            )));
        }
        self.train
            .validate(self.levels.as_slice())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..1.0).contains(&self.augment.ratio) {
            return Err(ConfigError::Invalid(format!("augment.ratio {} must lie in [0, 1)", self.augment.ratio)));
        }
        if let Some(r) = self.sweep.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(ConfigError::Invalid(format!("sweep ratio {r} must lie in [0, 1)")));
        }
        if !(self.eval.interval_lower < self.eval.interval_upper) {
            return Err(ConfigError::Invalid("eval.interval_lower must be below eval.interval_upper".into()));
        }
        Ok(())
    }

    /// Parses config text over the defaults. `base` resolves relative
    /// `world_config`/`model_config` paths.
    pub fn parse(text: &str, name: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let own = parse_lines(text, name)?;
        for (_, key, value) in &own {
            let prefix = match key.as_str() {
                "world_config" => "world",
                "model_config" => "model",
                _ => continue,
            };
            let path = base.join(value);
            let sub = fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            for (l, k, v) in parse_lines(&sub, &path.display().to_string())? {
                let k = if k.starts_with(&format!("{prefix}.")) { k } else { format!("{prefix}.{k}") };
                entries.push((l, k, v));
            }
        }
        entries.extend(own.into_iter().filter(|(_, k, _)| k != "world_config" && k != "model_config"));
        let mut seen = std::collections::HashSet::new();
        let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        for (_, key, raw) in &entries {
            // Included world/model files may be overridden by the main file.
            if !seen.insert(key.clone()) && !key.starts_with("world.") && !key.starts_with("model.") {
                return Err(ConfigError::Invalid(format!("key `{key}` set twice")));
            }
            if HIDDEN.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
            set_path(&mut value, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::parse(&text, &path.display().to_string(), path.parent().unwrap_or(Path::new(".")))
    }

    /// Flat text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut lines);
        let mut s = String::new();
        for (k, v) in lines {
            if HIDDEN.contains(&k.as_str()) || (k == "data" && v.is_empty()) {
                continue;
            }
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

fn parse_lines(text: &str, name: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                file: name.into(),
                line: i + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            });
        };
        let k = k.trim();
        if k.is_empty() || k.split('.').any(|p| p.is_empty()) {
            return Err(ConfigError::Syntax {
                file: name.into(),
                line: i + 1,
                reason: format!("malformed key `{k}`"),
            });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_scalar(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let bad = |expected| ConfigError::Value {
        key: key.into(),
        value: raw.into(),
        expected,
    };
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("a boolean"))?),
        Value::Number(n) if n.is_u64() => Value::Number(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.into()),
        Value::Number(n) if n.is_i64() => Value::Number(raw.parse::<i64>().map_err(|_| bad("an integer"))?.into()),
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::Number(Number::from_f64(f).ok_or_else(|| bad("a finite number"))?)
        }
        _ => Value::String(raw.into()),
    })
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = cur.as_object_mut().ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        let slot = obj.get_mut(*p).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        if i + 1 < parts.len() {
            cur = slot;
            continue;
        }
        let new = match &*slot {
            Value::Object(_) => return Err(ConfigError::UnknownKey(key.into())),
            Value::Array(items) => {
                let like = items.first().cloned().unwrap_or(Value::Number(Number::from_f64(0.0).expect("finite")));
                let vals = raw
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_scalar(key, s, &like))
                    .collect::<Result<Vec<_>>>()?;
                Value::Array(vals)
            }
            Value::Null => Value::String(raw.into()),
            other => parse_scalar(key, raw, other)?,
        };
        *slot = new;
        return Ok(());
    }
    Err(ConfigError::UnknownKey(key.into()))
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
    let scalar = |v: &Value| match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    };
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, &key, out);
            }
        }
        Value::Array(items) => out.push((prefix.into(), items.iter().map(scalar).collect::<Vec<_>>().join(","))),
        other => out.push((prefix.into(), scalar(other))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, "test", Path::new("."))
    }

    #[test]
    fn dotted_keys_and_comments() {
        let c = parse("# header\nworld.tail.alpha = 2.5 # inline\nmodel.blocks=2\nseeds = 3, 4\nhead = shared_sorted\n\nlevels = 0.5,0.9\ntrain.adam.lr = 0.01\n").unwrap();
        assert_eq!(c.world.tail.alpha, 2.5);
        assert_eq!(c.model.blocks, 2);
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.head, HeadKind::SharedSorted);
        assert_eq!(c.levels.as_slice(), &[0.5, 0.9]);
        assert_eq!(c.train.adam.lr, 0.01);
    }

    #[test]
    fn unknown_and_bad_values_rejected() {
        assert!(matches!(parse("world.tail.beta = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(parse("world.tail = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(parse("train.seed = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(parse("model.blocks = two"), Err(ConfigError::Value { .. })));
        assert!(matches!(parse("no equals"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse("seeds ="), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse("levels = 0.9, 0.5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse("head = magic"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse("data = /no/such/dir"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse("n = 5\nn = 6"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.world.tail.alpha = 2.25;
        c.seeds = vec![7, 8, 9];
        c.train.adam.eps = 1e-8;
        let back = parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn included_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("world.cfg"), "tail.alpha = 3.0\nworld.noise = 0.2\n").unwrap();
        fs::write(dir.path().join("model.cfg"), "filters = 8\n").unwrap();
        let main = dir.path().join("run.cfg");
        fs::write(&main, "world_config = world.cfg\nmodel_config = model.cfg\nworld.noise = 0.25\n").unwrap();
        let c = RunConfig::load(&main).unwrap();
        assert_eq!((c.world.tail.alpha, c.world.noise, c.model.filters), (3.0, 0.25, 8));
        fs::write(&main, "world_config = missing.cfg\n").unwrap();
        assert!(matches!(RunConfig::load(&main), Err(ConfigError::Io { .. })));
    }
}
