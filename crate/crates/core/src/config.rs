//! Run configuration: a single TOML tree covering every stage, with
//! dotted-path overrides applied before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data_sim::GainConfig;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::model::CspConfig;
use crate::pretext::{LossWeights, PretextConfig, StubTeacherConfig};
use crate::quantizer::TemperatureSchedule;
use crate::separation::{SepTrainConfig, SeparatorConfig};
use crate::trainer::PretrainConfig;

pub const SEED_ENV: &str = "CSP_SEED";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sample_rate: u32,
    pub gains: GainConfig,
    /// Mixtures generated by `simulate --synthetic`.
    pub synthetic_count: usize,
    pub synthetic_duration_s: f64,
    /// Trailing share of the training manifest held out for validation.
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sample_rate: crate::audio::DEFAULT_SAMPLE_RATE,
            gains: GainConfig::default(),
            synthetic_count: 8,
            synthetic_duration_s: 4.0,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub histogram_bin_db: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { histogram_bin_db: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub chunk_ms: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { chunk_ms: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiConfig {
    pub joints: usize,
    pub max_alphabet: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            joints: 100,
            max_alphabet: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; stage seeds are derived from it when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub frontend: FrontendConfig,
    pub pretext: PretextConfig,
    pub loss: LossWeights,
    pub temperature: TemperatureSchedule,
    pub teacher: StubTeacherConfig,
    pub pretrain: PretrainConfig,
    pub separator: SeparatorConfig,
    pub sep_train: SepTrainConfig,
    pub eval: EvalConfig,
    pub profile: ProfileConfig,
    pub mi: MiConfig,
}

impl RunConfig {
    /// Small dimensions and short schedules for tests and quick runs.
    pub fn tiny() -> Self {
        let csp = CspConfig::tiny();
        Self {
            frontend: csp.frontend,
            pretext: csp.pretext,
            loss: csp.loss,
            temperature: csp.temperature,
            teacher: csp.teacher,
            pretrain: PretrainConfig {
                lr: 2e-3,
                warmup_steps: 30,
                crop_s: 4.0,
                max_steps: 20,
                eval_every: 10,
                patience: 5,
                ..PretrainConfig::default()
            },
            separator: SeparatorConfig::tiny(),
            sep_train: SepTrainConfig {
                steps: 10,
                crop_s: 1.0,
                ..SepTrainConfig::default()
            },
            data: DataConfig {
                synthetic_count: 4,
                synthetic_duration_s: 2.0,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected default or tiny)"))),
        }
    }

    /// Loads `base`, merges the optional file over it and applies `overrides`
    /// (`dotted.key=value`). Unknown keys anywhere are rejected.
    pub fn resolve(base: &RunConfig, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, Value::Table(table));
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.csp().validate()?;
        self.pretrain.validate()?;
        self.separator.validate()?;
        if !(self.eval.histogram_bin_db > 0.0) {
            return Err(Error::Config("eval.histogram_bin_db must be positive".into()));
        }
        if !(self.profile.chunk_ms > 0.0) {
            return Err(Error::Config("profile.chunk_ms must be positive".into()));
        }
        if self.data.sample_rate == 0 || !(self.data.synthetic_duration_s > 0.0) {
            return Err(Error::Config("data.sample_rate and data.synthetic_duration_s must be positive".into()));
        }
        Ok(())
    }

    /// Explicit seed, else the config's, else `CSP_SEED`, else 0. The result is
    /// stored back and copied into the stage configs.
    pub fn settle_seed(&mut self, explicit: Option<u64>) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let seed = explicit.or(self.seed).or(env).unwrap_or(0);
        self.seed = Some(seed);
        self.pretrain.seed = seed;
        self.sep_train.seed = seed;
        Ok(seed)
    }

    pub fn csp(&self) -> CspConfig {
        CspConfig {
            frontend: self.frontend.clone(),
            pretext: self.pretext.clone(),
            loss: self.loss,
            temperature: self.temperature,
            teacher: self.teacher.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let mut node = tree;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {spec:?}: {k} is not a section")))?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {spec:?}: parent is not a section")))?;
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
