//! Virtual-pin vocabulary of the operator API.
//!
//! | pin | value | effect |
//! |-----|-------|--------|
//! | V5, V6, V7 | 0 or 1 | manual valve for pot 1, 2, 3 (MANUAL only) |
//! | V8 | `pot·10000 + counts` | threshold of pot index 0..2, counts 0..4095 |
//! | V9 | 1, 2, 3 | mode AI, AUTO, MANUAL |

use std::fmt;
use std::str::FromStr;

use drip_core::domain::{Mode, PotId, RelayState, ADC_MAX};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pin {
    V5,
    V6,
    V7,
    V8,
    V9,
}

impl FromStr for Pin {
    type Err = PinError;

    fn from_str(s: &str) -> Result<Pin, PinError> {
        match s {
            "V5" => Ok(Pin::V5),
            "V6" => Ok(Pin::V6),
            "V7" => Ok(Pin::V7),
            "V8" => Ok(Pin::V8),
            "V9" => Ok(Pin::V9),
            other => Err(PinError::UnknownPin(other.to_string())),
        }
    }
}

impl fmt::Display for Pin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinWrite {
    Valve { pot: PotId, state: RelayState },
    Threshold { pot: PotId, counts: u32 },
    Mode(Mode),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PinError {
    #[error("unknown pin {0:?}")]
    UnknownPin(String),
    #[error("invalid value for {pin}: {reason}")]
    InvalidValue { pin: Pin, reason: String },
}

/// Decodes a pin write; `body` is a decimal integer, surrounding whitespace
/// allowed.
pub fn decode(pin: &str, body: &str) -> Result<PinWrite, PinError> {
    let pin: Pin = pin.parse()?;
    let invalid = |reason: String| PinError::InvalidValue { pin, reason };
    let text = body.trim();
    let value: i64 = text
        .parse()
        .map_err(|_| invalid(format!("{text:?} is not an integer")))?;
    match pin {
        Pin::V5 | Pin::V6 | Pin::V7 => {
            let pot = PotId::ALL[pin as usize];
            let state = match value {
                0 => RelayState::Off,
                1 => RelayState::On,
                v => return Err(invalid(format!("valve value must be 0 or 1, got {v}"))),
            };
            Ok(PinWrite::Valve { pot, state })
        }
        Pin::V8 => {
            if value < 0 {
                return Err(invalid(format!("negative value {value}")));
            }
            let (pot, counts) = (value / 10_000, value % 10_000);
            let pot = PotId::new(pot as usize)
                .map_err(|_| invalid(format!("pot index {pot} out of range 0..=2")))?;
            if counts > i64::from(ADC_MAX) {
                return Err(invalid(format!("threshold {counts} outside 0..={ADC_MAX}")));
            }
            Ok(PinWrite::Threshold {
                pot,
                counts: counts as u32,
            })
        }
        Pin::V9 => Mode::from_code(value)
            .map(PinWrite::Mode)
            .map_err(|e| invalid(e.to_string())),
    }
}
