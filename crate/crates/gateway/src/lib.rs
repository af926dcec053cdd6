//! Operator-facing service for the twin: a control loop that owns the
//! simulation and the telemetry log, and an HTTP API with state, history,
//! virtual-pin commands and a server-sent event stream.

pub mod api;
pub mod control;
pub mod pins;

pub use api::router;
pub use control::{ControlLoop, Shared, StateView, StreamEvent};
pub use pins::{decode, Pin, PinError, PinWrite};
