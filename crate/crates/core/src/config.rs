//! Run configuration: a TOML file with one table per stage, layered over a
//! size profile and under command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datasets::GeneratorConfig;
use crate::error::{KvecError, Result};
use crate::evalkit::HaltMode;
use crate::kvrl::EncoderConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Encoder size presets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Small,
    Traffic,
}

impl Profile {
    pub fn encoder(self) -> EncoderConfig {
        match self {
            Profile::Desk => EncoderConfig::desk(),
            Profile::Small => EncoderConfig::small(),
            Profile::Traffic => EncoderConfig::traffic(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Policy,
    Fixed,
    Confidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Halting step of the fixed rule.
    pub tau: usize,
    /// Confidence threshold of the confidence rule.
    pub mu: f64,
    /// Which split to score: train, validation or test.
    pub split: String,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Policy,
            tau: 10,
            mu: 0.9,
            split: "test".into(),
            bins: 10,
        }
    }
}

impl EvalConfig {
    pub fn halt_mode(&self) -> HaltMode {
        match self.mode {
            EvalMode::Policy => HaltMode::Policy,
            EvalMode::Fixed => HaltMode::Fixed(self.tau),
            EvalMode::Confidence => HaltMode::Confidence(self.mu),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// One of beta, alpha, tau, mu, concurrency.
    pub parameter: String,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            parameter: "beta".into(),
            grid: vec![0.01, 0.1, 1.0],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Cache projected keys and values instead of recomputing them.
    pub cache_kv: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig { cache_kv: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset root holding train/validation/test.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    /// When set, seeds both generation and training.
    pub seed: Option<u64>,
    pub generate: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub stream: StreamConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_profile(Profile::Desk)
    }
}

/// Overlays `over` onto `base`, recursing into tables.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Builds a nested table from a dotted path such as `train.beta`.
pub fn override_at(path: &str, value: Value) -> Table {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut table = Table::new();
    table.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(table));
        table = outer;
    }
    table
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        RunConfig {
            profile,
            seed: None,
            generate: GeneratorConfig::default(),
            model: ModelConfig {
                encoder: profile.encoder(),
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            stream: StreamConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// Resolves profile defaults, then the file, then `overrides`. Unknown keys
    /// anywhere are errors.
    pub fn resolve(file: Option<&Path>, overrides: Vec<Table>) -> Result<Self> {
        let mut layers = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let table: Table = text
                .parse()
                .map_err(|e: toml::de::Error| KvecError::Config(format!("{}: {}", path.display(), e.message())))?;
            layers.push(table);
        }
        layers.extend(overrides);
        let mut profile_layer = Table::new();
        for layer in &layers {
            if let Some(p) = layer.get("profile") {
                profile_layer.insert("profile".into(), p.clone());
            }
        }
        let profile: Profile = Value::Table(profile_layer)
            .try_into::<ProfileOnly>()
            .map_err(|e| KvecError::Config(e.message().to_string()))?
            .profile;
        let mut merged = Table::try_from(RunConfig::for_profile(profile))
            .map_err(|e| KvecError::Config(e.to_string()))?;
        for layer in layers {
            merge(&mut merged, layer);
        }
        let mut cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| KvecError::Config(e.message().to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.generate.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        self.generate.check()?;
        self.model.encoder.check()?;
        self.train.check()?;
        if !["train", "validation", "test"].contains(&self.eval.split.as_str()) {
            return Err(KvecError::Config(format!("eval.split `{}` is not a split", self.eval.split)));
        }
        if self.eval.bins == 0 {
            return Err(KvecError::Config("eval.bins must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KvecError::Config(e.to_string()))
    }
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct ProfileOnly {
    profile: Profile,
}
