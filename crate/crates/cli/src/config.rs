//! The TOML experiment file. Every section is optional; flags given on the
//! command line override the matching entries.

use std::path::Path;

use coanno_core::engine::{DEFAULT_MAX_ADDS, DEFAULT_TAU};
use coanno_core::init::DEFAULT_VISIBILITY_THRESHOLD;
use coanno_core::io::SplitSizes;
use coanno_core::synth::WorldConfig;
use coanno_core::training::{AccuracyConfig, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub budget: usize,
    pub tau: f64,
    pub max_adds: usize,
    pub visibility_threshold: f64,
    pub ia: bool,
    pub ca_relabel: bool,
    pub ca_add: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            budget: 40,
            tau: DEFAULT_TAU,
            max_adds: DEFAULT_MAX_ADDS,
            visibility_threshold: DEFAULT_VISIBILITY_THRESHOLD,
            ia: true,
            ca_relabel: true,
            ca_add: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub accuracy: AccuracyConfig,
    /// PQ levels reported as actions-to-reach columns.
    pub targets: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { accuracy: AccuracyConfig::default(), targets: vec![0.6] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    /// Budget for assistant additions per turn; 0 disables the limit.
    pub turn_budget_ms: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { addr: "127.0.0.1:8080".into(), turn_budget_ms: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub world: WorldConfig,
    pub splits: SplitSizes,
    pub training: PipelineConfig,
    pub simulate: SimulateConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            world: WorldConfig::default(),
            splits: SplitSizes::default(),
            training: PipelineConfig::default(),
            simulate: SimulateConfig::default(),
            eval: EvalConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Config::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Applies a seed to every randomized component. The world seed only
    /// changes under `synth`, where it defines the data.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.training.sampling.seed = seed;
        self.training.context.seed = seed;
        self.training.ia.seed = seed;
        self.eval.accuracy.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let s = &self.simulate;
        if !(0.0..=1.0).contains(&s.tau) {
            return Err(CliError::Config(format!("simulate.tau must lie in [0, 1], got {}", s.tau)));
        }
        if !(0.0..=1.0).contains(&s.visibility_threshold) {
            return Err(CliError::Config("simulate.visibility_threshold must lie in [0, 1]".into()));
        }
        if self.eval.targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(CliError::Config("eval.targets must lie in [0, 1]".into()));
        }
        self.training.context.model.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
