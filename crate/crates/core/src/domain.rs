//! Shared vocabulary: modes, relay levels, pot indexing, sensor snapshots and
//! operator notifications.
//!
//! Units are conventions: soil readings are raw 12-bit ADC counts where a
//! higher count means drier soil, temperatures are whole °C, humidity whole
//! %RH, flow L/min, timestamps whole seconds of simulation time.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest value a 12-bit ADC can report.
pub const ADC_MAX: u16 = 4095;

/// Number of pots (and relays, and soil-sensor pairs).
pub const POT_COUNT: usize = 3;

/// Number of soil-moisture channels, two per pot.
pub const SOIL_CHANNELS: usize = 2 * POT_COUNT;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("mode code {0} out of range (expected 1, 2 or 3)")]
    ModeCode(i64),
    #[error("pot index {0} out of range (expected 0..=2)")]
    PotIndex(usize),
}

/// Operating mode. The integer codes are part of the wire protocol and the
/// virtual-pin API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Ai = 1,
    Auto = 2,
    Manual = 3,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Ai, Mode::Auto, Mode::Manual];

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Maps a wire/pin code to a mode. Out-of-range codes are rejected and the
    /// caller keeps whatever mode it had.
    pub fn from_code(code: i64) -> Result<Mode, DomainError> {
        match code {
            1 => Ok(Mode::Ai),
            2 => Ok(Mode::Auto),
            3 => Ok(Mode::Manual),
            other => Err(DomainError::ModeCode(other)),
        }
    }
}

/// Free-function form of [`Mode::from_code`].
pub fn parse_mode(code: i64) -> Result<Mode, DomainError> {
    Mode::from_code(code)
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ai => "AI",
            Mode::Auto => "AUTO",
            Mode::Manual => "MANUAL",
        })
    }
}

/// Electrical level on a relay input pin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Low,
    High,
}

/// Logical relay state. The relay board is active-low, so the only way to get
/// an electrical level is through [`RelayState::level`], which keeps ON⇔LOW.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RelayState {
    On,
    #[default]
    Off,
}

impl RelayState {
    pub fn level(self) -> Level {
        match self {
            RelayState::On => Level::Low,
            RelayState::Off => Level::High,
        }
    }

    pub fn from_level(level: Level) -> RelayState {
        match level {
            Level::Low => RelayState::On,
            Level::High => RelayState::Off,
        }
    }

    pub fn is_on(self) -> bool {
        self == RelayState::On
    }

    pub fn from_bool(on: bool) -> RelayState {
        if on {
            RelayState::On
        } else {
            RelayState::Off
        }
    }
}

impl fmt::Display for RelayState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelayState::On => "ON",
            RelayState::Off => "OFF",
        })
    }
}

/// One of the three pots. Pot `i` owns relay `i` and soil channels `2i`,`2i+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct PotId(u8);

impl PotId {
    pub const ALL: [PotId; POT_COUNT] = [PotId(0), PotId(1), PotId(2)];

    pub fn new(index: usize) -> Result<PotId, DomainError> {
        if index < POT_COUNT {
            Ok(PotId(index as u8))
        } else {
            Err(DomainError::PotIndex(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn relay_channel(self) -> usize {
        self.index()
    }

    pub fn soil_channels(self) -> [usize; 2] {
        let i = self.index();
        [2 * i, 2 * i + 1]
    }

    /// Human name, `pot_1` .. `pot_3`.
    pub fn name(self) -> String {
        format!("pot_{}", self.0 + 1)
    }
}

impl TryFrom<usize> for PotId {
    type Error = DomainError;

    fn try_from(value: usize) -> Result<Self, Self::Error> {
        PotId::new(value)
    }
}

impl From<PotId> for usize {
    fn from(p: PotId) -> usize {
        p.index()
    }
}

impl fmt::Display for PotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pot_{}", self.0 + 1)
    }
}

/// Floor mean of the two soil channels belonging to `pot`. This is the
/// firmware's AUTO decision variable and the forecaster's target.
pub fn zone_average(soil_adc: &[u16; SOIL_CHANNELS], pot: PotId) -> u16 {
    let [a, b] = pot.soil_channels();
    ((u32::from(soil_adc[a]) + u32::from(soil_adc[b])) / 2) as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rain {
    #[default]
    Dry,
    Wet,
}

/// One timestamped reading of every sensor plus relay and mode state.
///
/// `temperature_c` / `humidity_pct` are `None` when the DHT sensor could not
/// be read on that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSnapshot {
    pub timestamp: u64,
    pub temperature_c: Option<i32>,
    pub humidity_pct: Option<i32>,
    pub rain: Rain,
    pub flow_lpm: f64,
    pub soil_adc: [u16; SOIL_CHANNELS],
    pub relay: [RelayState; POT_COUNT],
    pub mode: Mode,
}

impl SensorSnapshot {
    pub fn zone_average(&self, pot: PotId) -> u16 {
        zone_average(&self.soil_adc, pot)
    }

    pub fn any_relay_on(&self) -> bool {
        self.relay.iter().any(|r| r.is_on())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationKind {
    RelayActivated,
    RelayDeactivated,
    SensorFailure,
    ModeChanged,
    /// Link to the operator side dropped or came back.
    ConnectivityChanged,
    /// Controller self-checks: AUTO mirror divergence, AI fallback.
    Diagnostic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    #[serde(rename = "ts")]
    pub timestamp: u64,
    pub kind: NotificationKind,
    #[serde(rename = "pot", skip_serializing_if = "Option::is_none", default)]
    pub pot_id: Option<PotId>,
    pub message: String,
}

impl Notification {
    pub fn new(
        timestamp: u64,
        kind: NotificationKind,
        pot_id: Option<PotId>,
        message: impl Into<String>,
    ) -> Self {
        Notification {
            timestamp,
            kind,
            pot_id,
            message: message.into(),
        }
    }
}
