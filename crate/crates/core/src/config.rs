//! Scenario configuration files and the assembled run description.
//!
//! A scenario file is TOML holding the arrival phases, dataset profiles, the
//! speculation mechanism, controller knobs, and engine sizing. Latency model
//! files and the run mode are supplied separately (by the CLI or a caller)
//! and combined here into a [`SimConfig`] that can be executed.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Controller, ControllerConfig, ControllerError, Mode, PolicyKind};
use crate::engine::{run_simulation, EngineError, SimOptions};
use crate::latency::LatencyProfiles;
use crate::metrics::MetricsLog;
use crate::speculation::{SpecKind, SpecProfile};
use crate::workload::{generate_arrivals, DatasetProfile, Scenario, ScenarioPhase, WorkloadError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecSection {
    pub kind: SpecKind,
    #[serde(default = "default_true_rate")]
    pub true_rate: f64,
    #[serde(default)]
    pub match_prob: Option<f64>,
    #[serde(default = "default_fixed_pld_len")]
    pub fixed_pld_len: u32,
    /// Overrides the derived prompt-lookup search cost.
    #[serde(default)]
    pub pld_lookup_cost_ms: Option<f64>,
}

fn default_true_rate() -> f64 {
    0.7
}

fn default_fixed_pld_len() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSection {
    pub duration_s: f64,
    pub qps: f64,
    /// Name of a dataset defined in this file or a builtin
    /// (`sharegpt`, `sonnet`, `cnn_dailymail`).
    pub dataset: String,
}

/// On-disk scenario schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub horizon_s: f64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    #[serde(default = "default_kv_total_slots")]
    pub kv_total_slots: u64,
    #[serde(default)]
    pub noise_sigma: f64,
    pub spec: SpecSection,
    #[serde(default)]
    pub controller: Option<ControllerConfig>,
    #[serde(default)]
    pub datasets: Vec<DatasetProfile>,
    pub phases: Vec<PhaseSection>,
}

fn default_max_batch() -> usize {
    64
}

fn default_kv_total_slots() -> u64 {
    1_000_000
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("unknown dataset '{0}' (not defined in the file and not a builtin)")]
    UnknownDataset(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ConfigError::Io(path.as_ref().display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| "scenario".to_string())
    }

    fn resolve_dataset(&self, name: &str) -> Result<DatasetProfile, ConfigError> {
        if let Some(d) = self.datasets.iter().find(|d| d.name == name) {
            return Ok(d.clone());
        }
        DatasetProfile::builtin(name).ok_or_else(|| ConfigError::UnknownDataset(name.to_string()))
    }

    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        let phases = self
            .phases
            .iter()
            .map(|p| {
                Ok(ScenarioPhase {
                    duration_s: p.duration_s,
                    qps: p.qps,
                    dataset: self.resolve_dataset(&p.dataset)?,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let scenario = Scenario {
            phases,
            seed: self.seed,
            horizon_s: self.horizon_s,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn spec_profile(&self) -> Result<SpecProfile, ConfigError> {
        let profile = SpecProfile {
            kind: self.spec.kind,
            true_rate: self.spec.true_rate,
            match_prob: self.spec.match_prob,
            fixed_pld_len: self.spec.fixed_pld_len,
        };
        profile
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(profile)
    }

    /// Controller config with policy and fixed proposal length defaulted from
    /// the speculation section.
    pub fn controller_config(&self) -> Result<ControllerConfig, ConfigError> {
        let mut config = self.controller.clone().unwrap_or_default();
        if self.controller.is_none() {
            config.policy = PolicyKind::from(self.spec.kind);
            config.fixed_pld_len = self.spec.fixed_pld_len;
        }
        if config.policy != PolicyKind::from(self.spec.kind) {
            return Err(ConfigError::Invalid(
                "controller.policy must match spec.kind".into(),
            ));
        }
        config.validate()?;
        Ok(config)
    }
}

/// A fully assembled run: scenario, mechanism, models, controller, and mode.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub scenario_name: String,
    pub scenario: Scenario,
    pub spec: SpecProfile,
    pub controller: ControllerConfig,
    pub profiles: LatencyProfiles,
    pub mode: Mode,
    pub seed: u64,
    pub max_batch: usize,
    pub kv_total_slots: u64,
    pub noise_sigma: f64,
    pub max_steps: Option<u64>,
}

impl SimConfig {
    pub fn from_scenario_file(
        file: &ScenarioFile,
        profiles: LatencyProfiles,
        mode: Mode,
        seed_override: Option<u64>,
    ) -> Result<Self, ConfigError> {
        let profiles = match file.spec.pld_lookup_cost_ms {
            Some(cost) => profiles.with_pld_lookup_cost(cost),
            None => profiles,
        };
        Ok(Self {
            scenario_name: file.display_name(),
            scenario: file.scenario()?,
            spec: file.spec_profile()?,
            controller: file.controller_config()?,
            profiles,
            mode,
            seed: seed_override.unwrap_or(file.seed),
            max_batch: file.max_batch,
            kv_total_slots: file.kv_total_slots,
            noise_sigma: file.noise_sigma,
            max_steps: None,
        })
    }

    fn meta(&self) -> Vec<(String, String)> {
        vec![
            ("scenario".into(), self.scenario_name.clone()),
            ("mode".into(), self.mode.to_string()),
            (
                "policy".into(),
                match self.controller.policy {
                    PolicyKind::DraftModel => "draft_model".into(),
                    PolicyKind::PromptLookup => "prompt_lookup".into(),
                },
            ),
            ("seed".into(), self.seed.to_string()),
            ("max_len".into(), self.controller.max_len.to_string()),
            (
                "fixed_pld_len".into(),
                self.controller.fixed_pld_len.to_string(),
            ),
            (
                "reset_period".into(),
                self.controller.reset_period.to_string(),
            ),
            ("ewma_decay".into(), self.controller.ewma_decay.to_string()),
            ("prior_rate".into(), self.controller.prior_rate.to_string()),
            ("max_batch".into(), self.max_batch.to_string()),
            (
                "kv_total_slots".into(),
                self.kv_total_slots.to_string(),
            ),
            ("noise_sigma".into(), self.noise_sigma.to_string()),
            ("horizon_s".into(), self.scenario.horizon_s.to_string()),
        ]
    }

    /// Generates the arrival stream and drains the engine. Identical configs
    /// and seeds produce identical logs.
    pub fn run(&self) -> Result<MetricsLog, ConfigError> {
        self.scenario.validate()?;
        self.mode.validate()?;

        let mut workload_rng = ChaCha8Rng::seed_from_u64(self.seed);
        let arrivals = generate_arrivals(&self.scenario, &mut workload_rng);

        let opts = SimOptions {
            // Decouple the engine's stream from the workload's so editing one
            // phase does not reshuffle the other runs' draws.
            seed: self.seed ^ 0x9E37_79B9_7F4A_7C15,
            max_batch: self.max_batch,
            kv_total_slots: self.kv_total_slots,
            noise_sigma: self.noise_sigma,
            horizon_ms: self.scenario.horizon_s * 1e3,
            max_steps: self.max_steps,
        };
        let controller = Controller::new(self.controller.clone(), self.mode);
        let log = run_simulation(
            self.spec.clone(),
            self.profiles.clone(),
            controller,
            arrivals,
            opts,
            self.meta(),
        )?;
        Ok(log)
    }
}
