//! The single TOML configuration document with `[sim]`, `[firmware]`,
//! `[controller]`, `[train]` and `[gateway]` sections. Every field has a
//! default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::firmware::FirmwareConfig;
use crate::plant::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("[{section}] {field}: {reason}")]
    Invalid {
        section: &'static str,
        field: &'static str,
        reason: String,
    },
}

/// Forecaster training settings. The forecaster crate turns these into its
/// own training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub hidden: usize,
    pub dense: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub lookback: usize,
    pub horizon: usize,
    /// Use every n-th training window.
    pub window_stride: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            hidden: 64,
            dense: 32,
            dropout: 0.2,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            batch_size: 32,
            clip_norm: 5.0,
            lookback: 60,
            horizon: 30,
            window_stride: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub bind: String,
    pub port: u16,
    /// Static bearer token required on every request.
    pub token: String,
    /// Events buffered per subscriber before the oldest are dropped.
    pub event_buffer: usize,
    /// Simulated seconds per wall-clock second.
    pub time_scale: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            token: "drip-dev-token".into(),
            event_buffer: 256,
            time_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub sim: SimConfig,
    pub firmware: FirmwareConfig,
    pub controller: ControllerConfig,
    pub train: TrainSettings,
    pub gateway: GatewayConfig,
}

impl SystemConfig {
    pub fn from_toml(text: &str) -> Result<SystemConfig, ConfigError> {
        let cfg: SystemConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SystemConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        SystemConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim.validate()?;
        self.firmware.validate()?;
        self.controller.validate()?;
        let t = &self.train;
        let bad = |field, reason: &str| {
            Err(ConfigError::Invalid {
                section: "train",
                field,
                reason: reason.into(),
            })
        };
        if t.hidden == 0 || t.dense == 0 {
            return bad("hidden", "layer sizes must be positive");
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if !(t.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if t.batch_size == 0 || t.lookback == 0 || t.horizon == 0 || t.window_stride == 0 {
            return bad("batch_size", "batch size, lookback, horizon and stride must be ≥ 1");
        }
        if !(self.gateway.time_scale > 0.0) {
            return Err(ConfigError::Invalid {
                section: "gateway",
                field: "time_scale",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}
