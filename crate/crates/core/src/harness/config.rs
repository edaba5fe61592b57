use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::edge_sim::{DeviceClass, DeviceProfile, DeviceTable, MemoryModel};
use crate::fed_methods::{EarlyStop, StrategyKind};
use crate::lora_model::{ModelConfig, TaskConfig, TrainingConfig};
use crate::perturbations::PerturbationSpec;
use crate::protocols::{Budget, DEFAULT_TARGET_FRACTIONS};

/// Environment variable that replaces the configured master seed.
pub const SEED_ENV: &str = "FEDBENCH_SEED";

/// Partial profile; unset fields keep the built-in value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceOverride {
    pub steps_per_second: Option<f64>,
    pub memory_capacity_mb: Option<f64>,
    pub active_power_watts: Option<f64>,
    pub comm_power_watts: Option<f64>,
    pub bandwidth_mbps: Option<f64>,
}

impl DeviceOverride {
    fn apply(&self, mut p: DeviceProfile) -> DeviceProfile {
        p.steps_per_second = self.steps_per_second.unwrap_or(p.steps_per_second);
        p.memory_capacity_mb = self.memory_capacity_mb.unwrap_or(p.memory_capacity_mb);
        p.active_power_watts = self.active_power_watts.unwrap_or(p.active_power_watts);
        p.comm_power_watts = self.comm_power_watts.unwrap_or(p.comm_power_watts);
        p.bandwidth_mbps = self.bandwidth_mbps.unwrap_or(p.bandwidth_mbps);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceOverrides {
    pub jetson: DeviceOverride,
    pub iqoo: DeviceOverride,
    pub p50: DeviceOverride,
    pub mate20: DeviceOverride,
    pub nova9: DeviceOverride,
}

impl DeviceOverrides {
    fn get(&self, class: DeviceClass) -> &DeviceOverride {
        match class {
            DeviceClass::Jetson => &self.jetson,
            DeviceClass::Iqoo => &self.iqoo,
            DeviceClass::P50 => &self.p50,
            DeviceClass::Mate20 => &self.mate20,
            DeviceClass::Nova9 => &self.nova9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// Clients per device class, fastest first. Replaced by the mix of a
    /// heterogeneity perturbation when one is configured.
    pub counts: [usize; 5],
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { counts: [20; 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub fractions: Vec<f64>,
    /// Explicit whole-percent targets; used instead of derivation when set.
    pub percent: Option<Vec<u32>>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_TARGET_FRACTIONS.to_vec(),
            percent: None,
        }
    }
}

/// Complete description of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    /// Label used for the model column in reports.
    pub model_label: String,
    pub seed: u64,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub eval_every: usize,
    pub server_aggregation_seconds: f64,
    pub upload_timeout_seconds: f64,
    /// Upload attempts a dropped client makes after the first; 0 disables.
    pub upload_retries: u32,
    pub early_stop: Option<EarlyStop>,
    pub method: StrategyKind,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub training: TrainingConfig,
    pub pool: PoolConfig,
    pub devices: DeviceOverrides,
    pub memory: MemoryModel,
    pub perturbation: PerturbationSpec,
    pub budget: Budget,
    pub targets: TargetConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            model_label: "toy-mlp".into(),
            seed: 1,
            rounds: 50,
            clients_per_round: 10,
            eval_every: 1,
            server_aggregation_seconds: 1.0,
            upload_timeout_seconds: 5.0,
            upload_retries: 0,
            early_stop: None,
            method: StrategyKind::FedAvgLora,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            training: TrainingConfig::default(),
            pool: PoolConfig::default(),
            devices: DeviceOverrides::default(),
            memory: MemoryModel::default(),
            perturbation: PerturbationSpec::None,
            budget: Budget::default(),
            targets: TargetConfig::default(),
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(String::new, |s| {
                text[..s.start].lines().last().unwrap_or("").split('=').next().unwrap_or("").trim().to_string()
            });
            HarnessError::Validation {
                field: if field.is_empty() { "<document>".into() } else { field },
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies the seed override from the environment, validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| invalid(SEED_ENV, format!("not a 64-bit unsigned integer: {seed:?}")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Device counts actually used for the pool.
    pub fn pool_counts(&self) -> [usize; 5] {
        match self.perturbation {
            PerturbationSpec::HeterogeneityMix { counts } => counts,
            _ => self.pool.counts,
        }
    }

    pub fn device_table(&self) -> Result<DeviceTable> {
        let profiles = DeviceClass::ALL.map(|c| self.devices.get(c).apply(DeviceProfile::default_for(c)));
        DeviceTable::new(profiles).map_err(|e| invalid("devices", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every", "must be at least 1"));
        }
        let pool_size: usize = self.pool_counts().iter().sum();
        if pool_size != self.task.num_clients {
            return Err(invalid(
                "pool.counts",
                format!("pool has {pool_size} clients but task.num_clients is {}", self.task.num_clients),
            ));
        }
        if self.clients_per_round == 0 || self.clients_per_round > pool_size {
            return Err(invalid(
                "clients_per_round",
                format!("must lie in [1, {pool_size}], got {}", self.clients_per_round),
            ));
        }
        for (name, v) in [
            ("server_aggregation_seconds", self.server_aggregation_seconds),
            ("upload_timeout_seconds", self.upload_timeout_seconds),
            ("memory.overhead_mb", self.memory.overhead_mb),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.training.batch_size == 0 {
            return Err(invalid("training.batch_size", "must be at least 1"));
        }
        if self.training.local_epochs == 0 {
            return Err(invalid("training.local_epochs", "must be at least 1"));
        }
        if let Some(stop) = self.early_stop {
            if stop.patience == 0 {
                return Err(invalid("early_stop.patience", "must be at least 1"));
            }
        }
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.task.validate().map_err(|e| invalid("task", e.to_string()))?;
        self.method
            .validate(self.model.hidden_dims.len() + 1)
            .map_err(|e| invalid("method", e.to_string()))?;
        self.perturbation
            .validate(pool_size)
            .map_err(|e| invalid("perturbation", e.to_string()))?;
        self.budget.validate().map_err(|e| invalid("budget", e.to_string()))?;
        self.device_table()?;
        if self.targets.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(invalid("targets.fractions", "fractions must lie in [0, 1]"));
        }
        if let Some(p) = &self.targets.percent {
            if p.iter().any(|&x| x > 100) {
                return Err(invalid("targets.percent", "targets are whole percents in [0, 100]"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(ScenarioConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ScenarioConfig::from_toml("roundz = 3").unwrap_err();
        assert!(matches!(e, HarnessError::Validation { .. }), "{e}");
        assert!(ScenarioConfig::from_toml("[model]\nrank = 4\nranq = 2").is_err());
    }

    #[test]
    fn selection_larger_than_pool_names_the_field() {
        match ScenarioConfig::from_toml("clients_per_round = 101") {
            Err(HarnessError::Validation { field, .. }) => assert_eq!(field, "clients_per_round"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mix_and_device_overrides() {
        let cfg = ScenarioConfig::from_toml(
            "[perturbation]\nkind = \"heterogeneity_mix\"\ncounts = [70, 20, 10, 0, 0]\n\n[devices.nova9]\nmemory_capacity_mb = 100.0\n",
        )
        .unwrap();
        assert_eq!(cfg.pool_counts(), [70, 20, 10, 0, 0]);
        let t = cfg.device_table().unwrap();
        assert_eq!(t.get(DeviceClass::Nova9).memory_capacity_mb, 100.0);
        assert_eq!(t.get(DeviceClass::Nova9).steps_per_second, 10.0);
        assert!(ScenarioConfig::from_toml("[perturbation]\nkind = \"heterogeneity_mix\"\ncounts = [70, 20, 10, 0, 1]\n").is_err());
    }
}
