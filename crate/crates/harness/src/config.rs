//! Experiment configuration files.
//!
//! Configs are TOML documents with dotted section names; the grammar is
//! documented in `configs/GRAMMAR.md`. Every key can be replaced from the
//! command line with `--override section.key=value`, where `value` is parsed
//! as a TOML value (bare words fall back to strings). Grid axes use the same
//! dotted paths.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lookbehind_core::lifelong::{LifelongMethod, DEFAULT_REPLAY_CAPACITY};
use lookbehind_core::models::{Activation, Normalization};
use lookbehind_core::optimizers::{AscentSchedule, Geometry, OptimizerConfig, Variant};
use lookbehind_core::robustness::NoiseSpec;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Serde adapter for the core's string-named enums.
mod named {
    use super::*;

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod named_opt {
    use super::*;

    pub fn serialize<T: Display, S: Serializer>(v: &Option<T>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.collect_str(v),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<Option<T>, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = Option::<String>::deserialize(d)?;
        s.map(|s| s.parse().map_err(serde::de::Error::custom)).transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch: Option<SwitchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharpness: Option<SharpnessConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<RobustnessConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lifelong: Option<LifelongSection>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(with = "named", default = "default_activation")]
        activation: Activation,
        #[serde(with = "named", default = "default_normalization")]
        normalization: Normalization,
    },
    Conv {
        #[serde(default = "default_filters")]
        filters: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(with = "named", default = "default_activation")]
        activation: Activation,
        #[serde(with = "named", default = "default_normalization")]
        normalization: Normalization,
    },
    /// `½ φᵀAφ`; `matrix` defaults to the identity.
    Quadratic {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        point: Option<Vec<f64>>,
        #[serde(default = "default_init_low")]
        init_low: f64,
        #[serde(default = "default_init_high")]
        init_high: f64,
    },
    SharpFlat {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        point: Option<f64>,
        #[serde(default = "default_init_low")]
        init_low: f64,
        #[serde(default = "default_init_high")]
        init_high: f64,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_normalization() -> Normalization {
    Normalization::None
}
fn default_filters() -> usize {
    8
}
fn default_kernel() -> usize {
    3
}
fn default_init_low() -> f64 {
    -2.0
}
fn default_init_high() -> f64 {
    2.0
}

impl ModelConfig {
    pub fn is_analytic(&self) -> bool {
        matches!(self, ModelConfig::Quadratic { .. } | ModelConfig::SharpFlat { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        /// Defaults to `classes`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
        separation: f64,
        #[serde(default)]
        label_noise: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        heldout_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        heldout_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        heldout_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Featureless rows for analytic landscapes; `steps` rows per epoch.
    Unit {
        #[serde(default = "default_steps")]
        steps: usize,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}
fn default_steps() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(with = "named", default = "defaults::variant")]
    pub variant: Variant,
    #[serde(with = "named", default = "defaults::geometry")]
    pub geometry: Geometry,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(with = "named", default = "defaults::ascent")]
    pub multistep_ascent: AscentSchedule,
}

mod defaults {
    use super::*;

    pub fn variant() -> Variant {
        OptimizerConfig::default().variant
    }
    pub fn geometry() -> Geometry {
        OptimizerConfig::default().geometry
    }
    pub fn lr() -> f64 {
        OptimizerConfig::default().lr
    }
    pub fn rho() -> f64 {
        OptimizerConfig::default().rho
    }
    pub fn k() -> usize {
        OptimizerConfig::default().k
    }
    pub fn alpha() -> f64 {
        OptimizerConfig::default().alpha
    }
    pub fn momentum() -> f64 {
        OptimizerConfig::default().momentum
    }
    pub fn ascent() -> AscentSchedule {
        OptimizerConfig::default().multistep_ascent
    }
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection::from(&OptimizerConfig::default())
    }
}

impl From<&OptimizerConfig> for OptimizerSection {
    fn from(c: &OptimizerConfig) -> Self {
        OptimizerSection {
            variant: c.variant,
            geometry: c.geometry,
            lr: c.lr,
            rho: c.rho,
            k: c.k,
            alpha: c.alpha,
            momentum: c.momentum,
            multistep_ascent: c.multistep_ascent,
        }
    }
}

impl OptimizerSection {
    pub fn to_core(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            rho: self.rho,
            k: self.k,
            alpha: self.alpha,
            momentum: self.momentum,
            geometry: self.geometry,
            variant: self.variant,
            multistep_ascent: self.multistep_ascent,
        }
    }
}

/// Step decay: `lr · factor^(−⌊epoch / period⌋)`, starting from `optimizer.lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_factor")]
    pub factor: f64,
    #[serde(default = "default_period")]
    pub period: usize,
}

fn default_factor() -> f64 {
    1.0
}
fn default_period() -> usize {
    1
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            factor: default_factor(),
            period: default_period(),
        }
    }
}

impl ScheduleConfig {
    pub fn lr_at(&self, initial: f64, epoch: usize) -> f64 {
        initial / self.factor.powi((epoch / self.period) as i32)
    }
}

/// Train with `[optimizer]` until `⌊fraction · epochs⌋`, then with
/// `[optimizer]` patched by the keys of `[switch.optimizer]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchConfig {
    pub fraction: f64,
    #[serde(default)]
    pub optimizer: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub axis: Vec<GridAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    /// Dotted config path, e.g. `optimizer.k`.
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessConfig {
    /// Defaults to the standard sweep for `geometry`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    /// Minibatch size m.
    #[serde(default = "default_m")]
    pub batch_size: usize,
    /// Defaults to the optimizer geometry.
    #[serde(with = "named_opt", default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Geometry>,
    #[serde(default = "default_ascent_steps")]
    pub ascent_steps: usize,
}

fn default_m() -> usize {
    128
}
fn default_ascent_steps() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_sigmas() -> Vec<f64> {
    NoiseSpec::default().sigmas
}
fn default_trials() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifelongSection {
    pub ways: usize,
    /// Method names such as `sgd`, `er-lookbehind-sam`, `lookbehind-c-maml`.
    pub methods: Vec<String>,
    #[serde(default = "default_task_epochs")]
    pub epochs: usize,
    #[serde(default = "default_task_batch")]
    pub batch_size: usize,
    #[serde(default = "default_task_hidden")]
    pub hidden: Vec<usize>,
    #[serde(with = "named", default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_capacity")]
    pub replay_capacity: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_task_epochs() -> usize {
    10
}
fn default_task_batch() -> usize {
    10
}
fn default_task_hidden() -> Vec<usize> {
    vec![32]
}
fn default_capacity() -> usize {
    DEFAULT_REPLAY_CAPACITY
}

impl LifelongSection {
    pub fn methods(&self) -> Result<Vec<LifelongMethod>> {
        self.methods
            .iter()
            .map(|m| {
                m.parse()
                    .map_err(|e: lookbehind_core::Error| HarnessError::config(e.to_string()))
            })
            .collect()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::config(format!("override `{o}` is not key=value")))?;
            set_path(&mut value, key.trim(), parse_value(raw.trim()))?;
        }
        Self::from_table(value)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text, overrides).map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes to a table")
    }

    /// Copy with `key` set to `value`, re-validated.
    pub fn with_value(&self, key: &str, value: toml::Value) -> Result<Self> {
        let mut table = self.to_table();
        set_path(&mut table, key, value)?;
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(HarnessError::config(m));
        if self.seeds.is_empty() {
            return err("at least one seed is required");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if self.schedule.period == 0 {
            return err("schedule.period must be at least 1");
        }
        if !self.schedule.factor.is_finite() || self.schedule.factor <= 0.0 {
            return err("schedule.factor must be positive");
        }
        self.optimizer.to_core().validate()?;
        if let Some(s) = &self.switch {
            if !(0.0..=1.0).contains(&s.fraction) {
                return err("switch.fraction must lie in [0, 1]");
            }
            self.switch_optimizer()?;
        }
        if let Some(g) = &self.grid {
            if g.axis.iter().any(|a| a.values.is_empty()) {
                return err("grid axes need at least one value");
            }
        }
        if self.model.is_analytic() != matches!(self.data, DataConfig::Unit { .. }) {
            return err("analytic landscapes pair with `unit` data and only with it");
        }
        if let Some(l) = &self.lifelong {
            l.methods()?;
            if l.ways == 0 || l.batch_size == 0 {
                return err("lifelong.ways and lifelong.batch_size must be at least 1");
            }
        }
        Ok(())
    }

    /// The optimizer after the switch point, if a switch is configured.
    pub fn switch_optimizer(&self) -> Result<Option<OptimizerSection>> {
        let Some(s) = &self.switch else {
            return Ok(None);
        };
        let mut base = toml::Table::try_from(&self.optimizer).expect("optimizer serializes");
        for (k, v) in &s.optimizer {
            base.insert(k.clone(), v.clone());
        }
        let target: OptimizerSection = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::config(format!("switch.optimizer: {e}")))?;
        target.to_core().validate()?;
        Ok(Some(target))
    }

    /// SHA-256 over the canonical JSON of the config with the seed list
    /// removed, so every seed of one setting shares a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// TOML scalar/array syntax, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| HarnessError::config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Compact rendering of a grid value for labels and CSV cells.
pub fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Float(f) => crate::format::g12(*f),
        other => other.to_string(),
    }
}
