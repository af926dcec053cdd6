//! Core of the drip-irrigation digital twin: domain types, the plant
//! simulation, the firmware emulator and its serial wire protocol, the
//! telemetry store and the backend controller.

pub mod bus;
pub mod config;
pub mod controller;
pub mod domain;
pub mod firmware;
pub mod plant;
pub mod protocol;
pub mod store;
pub mod twin;

pub use config::{ConfigError, SystemConfig};
pub use controller::{Controller, ControllerConfig, ForecastSource};
pub use domain::{Mode, Notification, NotificationKind, PotId, Rain, RelayState, SensorSnapshot};
pub use store::{Dataset, TelemetryLog};
pub use twin::Twin;
