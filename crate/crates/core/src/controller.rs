//! Backend mode orchestration.
//!
//! The controller owns the operator-facing state: which mode is selected,
//! per-pot thresholds, sensor health and the current AI irrigation plan. It
//! reacts to three kinds of input (operator commands, telemetry frames, clock
//! ticks) and answers with [`Action`]s: wire commands for the device and
//! notifications for the operator. Handlers run one at a time.
//!
//! Safety rules enforced here:
//! - any failed sensor halts irrigation in every mode until it recovers;
//!   in AUTO the halt is applied by raising device thresholds to the ADC
//!   ceiling, which the on-device rule can never exceed;
//! - losing the operator link in MANUAL closes every valve;
//! - only an explicit operator command changes the mode.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::domain::{
    Mode, Notification, NotificationKind, PotId, RelayState, SensorSnapshot, ADC_MAX, POT_COUNT,
    SOIL_CHANNELS,
};
use crate::firmware::auto_decision;
use crate::protocol::Command;

/// The `[controller]` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Irrigation seconds per ADC count of forecast deficit.
    pub alpha: f64,
    pub dur_min: u64,
    pub dur_max: u64,
    /// Consecutive stuck frames before a sensor is declared failed.
    pub stuck_frames: usize,
    /// Seconds between AI planning rounds.
    pub replan_interval: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            alpha: 0.1,
            dur_min: 5,
            dur_max: 120,
            stuck_frames: 5,
            replan_interval: 300,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field, reason: &str| {
            Err(ConfigError::Invalid {
                section: "controller",
                field,
                reason: reason.into(),
            })
        };
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be positive");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return bad("dur_min", "need 0 < dur_min <= dur_max");
        }
        if self.stuck_frames == 0 {
            return bad("stuck_frames", "must be at least 1");
        }
        Ok(())
    }

    pub fn ai_params(&self) -> AiParams {
        AiParams {
            alpha: self.alpha,
            dur_min: self.dur_min,
            dur_max: self.dur_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AiParams {
    pub alpha: f64,
    pub dur_min: u64,
    pub dur_max: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    #[default]
    Healthy,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SensorHealth {
    pub soil: [Health; SOIL_CHANNELS],
    pub dht: Health,
}

impl SensorHealth {
    pub fn any_failed(&self) -> bool {
        self.dht == Health::Failed || self.soil.contains(&Health::Failed)
    }
}

/// Health over the most recent `k` frames (oldest first in `recent`). A soil
/// channel has failed when it sat on the same ADC rail (0 or 4095) for all
/// `k`; the DHT has failed when it was unreadable for all `k`. Windows shorter
/// than `k` are reported healthy.
pub fn detect_sensor_failure(recent: &[SensorSnapshot], k: usize) -> SensorHealth {
    let mut health = SensorHealth::default();
    if k == 0 || recent.len() < k {
        return health;
    }
    let window = &recent[recent.len() - k..];
    for ch in 0..SOIL_CHANNELS {
        let stuck = |rail: u16| window.iter().all(|f| f.soil_adc[ch] == rail);
        if stuck(0) || stuck(ADC_MAX) {
            health.soil[ch] = Health::Failed;
        }
    }
    if window
        .iter()
        .all(|f| f.temperature_c.is_none() || f.humidity_pct.is_none())
    {
        health.dht = Health::Failed;
    }
    health
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    #[default]
    Forecast,
    /// No forecast was available; the pot is driven by threshold logic.
    ThresholdFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PotPlan {
    pub irrigate: bool,
    pub duration_s: u64,
    pub source: PlanSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct IrrigationPlan {
    pub pots: [PotPlan; POT_COUNT],
}

/// Seconds to irrigate given a forecast mean: zero when the mean does not
/// exceed the threshold, else `⌈α·deficit⌉` clamped to `[dur_min, dur_max]`.
pub fn irrigation_duration(forecast_mean: f64, threshold: u16, p: &AiParams) -> u64 {
    let deficit = forecast_mean - f64::from(threshold);
    if !(deficit > 0.0) {
        return 0;
    }
    let raw = (p.alpha * deficit).ceil();
    (raw as u64).clamp(p.dur_min, p.dur_max)
}

/// Plans one AI round. Forecasts are per pot, in ADC counts; a missing
/// forecast marks that pot for threshold fallback.
pub fn run_ai_mode(forecasts: &[Option<Vec<f64>>; POT_COUNT], s: &ControllerState) -> IrrigationPlan {
    let mut plan = IrrigationPlan::default();
    for pot in PotId::ALL {
        let i = pot.index();
        plan.pots[i] = match forecasts[i].as_deref() {
            Some(f) if !f.is_empty() => {
                let mean = f.iter().sum::<f64>() / f.len() as f64;
                let duration_s = irrigation_duration(mean, s.threshold[i], &s.ai_params);
                PotPlan {
                    irrigate: duration_s > 0,
                    duration_s,
                    source: PlanSource::Forecast,
                }
            }
            _ => PotPlan {
                irrigate: false,
                duration_s: 0,
                source: PlanSource::ThresholdFallback,
            },
        };
    }
    plan
}

/// Relay states the device should settle on under AUTO for these readings.
pub fn run_auto_mode(
    soil_adc: &[u16; SOIL_CHANNELS],
    thresholds: &[u16; POT_COUNT],
) -> [RelayState; POT_COUNT] {
    PotId::ALL.map(|p| auto_decision(soil_adc, p, thresholds[p.index()]))
}

/// Forwards operator valve requests as relay commands, nothing else.
pub fn run_manual_mode(user_inputs: &[(PotId, RelayState)]) -> Vec<Command> {
    user_inputs
        .iter()
        .map(|&(relay, state)| Command::Relay { relay, state })
        .collect()
}

/// Supplies soil-moisture forecasts for AI mode.
pub trait ForecastSource: Send {
    /// Frames of history a forecast needs.
    fn lookback(&self) -> usize;
    /// Forecast of the pot's zone average in ADC counts, oldest step first;
    /// `None` when no model or not enough history.
    fn forecast(&self, pot: PotId, history: &[SensorSnapshot]) -> Option<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerState {
    pub current_mode: Mode,
    pub last_mode: Mode,
    pub connected: bool,
    pub sensor_health: SensorHealth,
    pub threshold: [u16; POT_COUNT],
    pub plan: IrrigationPlan,
    pub ai_params: AiParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send(Command),
    Notify(Notification),
}

/// Mode routine run by [`Controller::dispatch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeEntry {
    Ai,
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    NotManual,
    Offline,
    SensorFault,
    InvalidThreshold(u32),
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::NotManual => f.write_str("manual control requires MANUAL mode"),
            Rejection::Offline => f.write_str("operator link is offline"),
            Rejection::SensorFault => f.write_str("irrigation halted after a sensor failure"),
            Rejection::InvalidThreshold(v) => write!(f, "threshold {v} outside 0..={ADC_MAX}"),
        }
    }
}

impl std::error::Error for Rejection {}

pub struct Controller {
    state: ControllerState,
    cfg: ControllerConfig,
    forecaster: Option<Box<dyn ForecastSource>>,
    history: VecDeque<SensorSnapshot>,
    history_cap: usize,
    reported_relays: [RelayState; POT_COUNT],
    off_deadline: [Option<u64>; POT_COUNT],
    last_plan_at: Option<u64>,
    last_forecasts: [Option<Vec<f64>>; POT_COUNT],
    pending_manual: Vec<(PotId, RelayState)>,
    halted: bool,
    mismatch: [u32; POT_COUNT],
    divergence_flagged: [bool; POT_COUNT],
    fallback_notified: [bool; POT_COUNT],
    now: u64,
}

impl fmt::Debug for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Controller")
            .field("state", &self.state)
            .field("halted", &self.halted)
            .field("now", &self.now)
            .finish_non_exhaustive()
    }
}

impl Controller {
    /// A controller for a device that just booted: AUTO, relays OFF, link up.
    pub fn new(cfg: ControllerConfig, thresholds: [u16; POT_COUNT]) -> Controller {
        let history_cap = cfg.stuck_frames.max(1);
        Controller {
            state: ControllerState {
                current_mode: Mode::Auto,
                last_mode: Mode::Auto,
                connected: true,
                sensor_health: SensorHealth::default(),
                threshold: thresholds,
                plan: IrrigationPlan::default(),
                ai_params: cfg.ai_params(),
            },
            cfg,
            forecaster: None,
            history: VecDeque::new(),
            history_cap,
            reported_relays: [RelayState::Off; POT_COUNT],
            off_deadline: [None; POT_COUNT],
            last_plan_at: None,
            last_forecasts: Default::default(),
            pending_manual: Vec::new(),
            halted: false,
            mismatch: [0; POT_COUNT],
            divergence_flagged: [false; POT_COUNT],
            fallback_notified: [false; POT_COUNT],
            now: 0,
        }
    }

    pub fn with_forecaster(mut self, source: Box<dyn ForecastSource>) -> Controller {
        self.history_cap = self.cfg.stuck_frames.max(source.lookback()).max(1);
        self.forecaster = Some(source);
        self
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn latest(&self) -> Option<&SensorSnapshot> {
        self.history.back()
    }

    /// Relay states from the most recent telemetry frame.
    pub fn reported_relays(&self) -> [RelayState; POT_COUNT] {
        self.reported_relays
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn last_forecasts(&self) -> &[Option<Vec<f64>>; POT_COUNT] {
        &self.last_forecasts
    }

    fn notify(&self, kind: NotificationKind, pot: Option<PotId>, msg: impl Into<String>) -> Action {
        Action::Notify(Notification::new(self.now, kind, pot, msg))
    }

    fn effective_thresholds(&self) -> [u16; POT_COUNT] {
        if self.halted {
            [ADC_MAX; POT_COUNT]
        } else {
            self.state.threshold
        }
    }

    /// Operator selects a mode. Takes effect at the next [`dispatch`].
    ///
    /// [`dispatch`]: Controller::dispatch
    pub fn set_mode(&mut self, mode: Mode) -> Result<(), Rejection> {
        if !self.state.connected {
            return Err(Rejection::Offline);
        }
        self.state.current_mode = mode;
        Ok(())
    }

    /// Operator opens or closes a valve. Honored only in MANUAL.
    pub fn manual_valve(&mut self, pot: PotId, state: RelayState) -> Result<Vec<Action>, Rejection> {
        if !self.state.connected {
            return Err(Rejection::Offline);
        }
        if self.state.current_mode != Mode::Manual {
            return Err(Rejection::NotManual);
        }
        if self.halted && state.is_on() {
            return Err(Rejection::SensorFault);
        }
        if self.state.last_mode != Mode::Manual {
            // MODE 3 has not gone out yet; dispatch forwards these after it
            self.pending_manual.push((pot, state));
            return Ok(Vec::new());
        }
        Ok(run_manual_mode(&[(pot, state)])
            .into_iter()
            .map(Action::Send)
            .collect())
    }

    pub fn set_threshold(&mut self, pot: PotId, counts: u32) -> Result<Vec<Action>, Rejection> {
        if !self.state.connected {
            return Err(Rejection::Offline);
        }
        if counts > u32::from(ADC_MAX) {
            return Err(Rejection::InvalidThreshold(counts));
        }
        self.state.threshold[pot.index()] = counts as u16;
        if self.halted {
            return Ok(Vec::new());
        }
        Ok(vec![Action::Send(Command::Threshold {
            relay: pot,
            counts: counts as u16,
        })])
    }

    /// Runs the entry routine of a newly selected mode, exactly once per
    /// transition.
    pub fn dispatch(&mut self) -> (Option<ModeEntry>, Vec<Action>) {
        let mode = self.state.current_mode;
        if mode == self.state.last_mode {
            return (None, Vec::new());
        }
        let mut actions = vec![
            self.notify(
                NotificationKind::ModeChanged,
                None,
                format!("mode changed from {} to {mode}", self.state.last_mode),
            ),
            Action::Send(Command::Mode(mode)),
        ];
        self.state.last_mode = mode;
        self.off_deadline = [None; POT_COUNT];
        self.state.plan = IrrigationPlan::default();
        self.last_plan_at = None;
        self.mismatch = [0; POT_COUNT];
        self.divergence_flagged = [false; POT_COUNT];
        self.fallback_notified = [false; POT_COUNT];
        let entry = match mode {
            Mode::Ai => {
                actions.extend(self.ai_round());
                ModeEntry::Ai
            }
            Mode::Auto => ModeEntry::Auto,
            Mode::Manual => {
                let inputs = std::mem::take(&mut self.pending_manual);
                actions.extend(run_manual_mode(&inputs).into_iter().map(Action::Send));
                ModeEntry::Manual
            }
        };
        self.pending_manual.clear();
        (Some(entry), actions)
    }

    fn forecasts(&self) -> [Option<Vec<f64>>; POT_COUNT] {
        let history: Vec<SensorSnapshot> = self.history.iter().cloned().collect();
        PotId::ALL.map(|pot| {
            self.forecaster
                .as_ref()
                .and_then(|f| f.forecast(pot, &history))
        })
    }

    /// Plans and starts one AI irrigation round.
    fn ai_round(&mut self) -> Vec<Action> {
        self.last_plan_at = Some(self.now);
        if self.halted {
            self.state.plan = IrrigationPlan::default();
            return Vec::new();
        }
        let forecasts = self.forecasts();
        let plan = run_ai_mode(&forecasts, &self.state);
        self.last_forecasts = forecasts;
        self.state.plan = plan;
        let mut actions = Vec::new();
        for pot in PotId::ALL {
            let i = pot.index();
            let p = plan.pots[i];
            match p.source {
                PlanSource::Forecast => {
                    self.fallback_notified[i] = false;
                    if p.irrigate {
                        actions.push(Action::Send(Command::Relay {
                            relay: pot,
                            state: RelayState::On,
                        }));
                        self.off_deadline[i] = Some(self.now + p.duration_s);
                    }
                }
                PlanSource::ThresholdFallback => {
                    if !self.fallback_notified[i] {
                        self.fallback_notified[i] = true;
                        actions.push(self.notify(
                            NotificationKind::Diagnostic,
                            Some(pot),
                            format!("{pot}: no forecast available, using threshold logic"),
                        ));
                    }
                }
            }
        }
        actions
    }

    /// Advances the controller clock: mode dispatch, AI valve timers and AI
    /// re-planning.
    pub fn tick(&mut self, now: u64) -> Vec<Action> {
        self.now = now;
        let (_, mut actions) = self.dispatch();
        if self.state.current_mode != Mode::Ai {
            return actions;
        }
        for pot in PotId::ALL {
            if let Some(deadline) = self.off_deadline[pot.index()] {
                if now >= deadline {
                    self.off_deadline[pot.index()] = None;
                    actions.push(Action::Send(Command::Relay {
                        relay: pot,
                        state: RelayState::Off,
                    }));
                }
            }
        }
        let idle = self.off_deadline.iter().all(Option::is_none);
        let due = self
            .last_plan_at
            .is_none_or(|t| now.saturating_sub(t) >= self.cfg.replan_interval);
        if idle && due && !self.halted {
            actions.extend(self.ai_round());
        }
        actions
    }

    /// Ingests one telemetry frame.
    pub fn on_telemetry(&mut self, snap: SensorSnapshot) -> Vec<Action> {
        self.now = self.now.max(snap.timestamp);
        let mut actions = Vec::new();

        self.history.push_back(snap.clone());
        while self.history.len() > self.history_cap {
            self.history.pop_front();
        }

        // health first, so a failure notice precedes the relay-off events it causes
        let window: Vec<SensorSnapshot> = self
            .history
            .iter()
            .skip(self.history.len().saturating_sub(self.cfg.stuck_frames))
            .cloned()
            .collect();
        let health = detect_sensor_failure(&window, self.cfg.stuck_frames);
        let previous = self.state.sensor_health;
        for ch in 0..SOIL_CHANNELS {
            if health.soil[ch] == Health::Failed && previous.soil[ch] == Health::Healthy {
                let pot = PotId::new(ch / 2).expect("channel maps to a pot");
                actions.push(self.notify(
                    NotificationKind::SensorFailure,
                    Some(pot),
                    format!("soil sensor {ch} ({pot}) stuck at {}; irrigation halted", snap.soil_adc[ch]),
                ));
            }
        }
        if health.dht == Health::Failed && previous.dht == Health::Healthy {
            actions.push(self.notify(
                NotificationKind::SensorFailure,
                None,
                "temperature/humidity sensor unreadable; irrigation halted",
            ));
        }
        self.state.sensor_health = health;
        if health.any_failed() && !self.halted {
            actions.extend(self.halt());
        } else if !health.any_failed() && self.halted {
            actions.extend(self.resume());
        }

        for pot in PotId::ALL {
            let i = pot.index();
            let (was, now) = (self.reported_relays[i], snap.relay[i]);
            if !was.is_on() && now.is_on() {
                actions.push(self.notify(
                    NotificationKind::RelayActivated,
                    Some(pot),
                    format!("{pot} valve opened"),
                ));
            } else if was.is_on() && !now.is_on() {
                actions.push(self.notify(
                    NotificationKind::RelayDeactivated,
                    Some(pot),
                    format!("{pot} valve closed"),
                ));
            }
        }
        self.reported_relays = snap.relay;

        if self.state.current_mode == Mode::Auto && snap.mode == Mode::Auto {
            actions.extend(self.check_auto_mirror(&snap));
        }
        if self.state.current_mode == Mode::Ai && self.state.last_mode == Mode::Ai && !self.halted {
            actions.extend(self.drive_fallback_pots(&snap));
        }
        actions
    }

    fn halt(&mut self) -> Vec<Action> {
        self.halted = true;
        self.off_deadline = [None; POT_COUNT];
        self.state.plan = IrrigationPlan::default();
        let mut actions = Vec::new();
        for pot in PotId::ALL {
            actions.push(Action::Send(Command::Threshold {
                relay: pot,
                counts: ADC_MAX,
            }));
            actions.push(Action::Send(Command::Relay {
                relay: pot,
                state: RelayState::Off,
            }));
        }
        actions
    }

    fn resume(&mut self) -> Vec<Action> {
        self.halted = false;
        let mut actions: Vec<Action> = PotId::ALL
            .iter()
            .map(|&pot| {
                Action::Send(Command::Threshold {
                    relay: pot,
                    counts: self.state.threshold[pot.index()],
                })
            })
            .collect();
        actions.push(self.notify(
            NotificationKind::Diagnostic,
            None,
            "sensors healthy again; irrigation resumed",
        ));
        actions
    }

    /// Compares the device's AUTO decisions with the backend's own; a mismatch
    /// persisting past one frame is reported once.
    fn check_auto_mirror(&mut self, snap: &SensorSnapshot) -> Vec<Action> {
        let expected = run_auto_mode(&snap.soil_adc, &self.effective_thresholds());
        let mut actions = Vec::new();
        for pot in PotId::ALL {
            let i = pot.index();
            if expected[i] == snap.relay[i] {
                self.mismatch[i] = 0;
                self.divergence_flagged[i] = false;
                continue;
            }
            self.mismatch[i] += 1;
            if self.mismatch[i] >= 2 && !self.divergence_flagged[i] {
                self.divergence_flagged[i] = true;
                actions.push(self.notify(
                    NotificationKind::Diagnostic,
                    Some(pot),
                    format!(
                        "{pot}: device relay {} but AUTO rule expects {}",
                        snap.relay[i], expected[i]
                    ),
                ));
            }
        }
        actions
    }

    fn drive_fallback_pots(&mut self, snap: &SensorSnapshot) -> Vec<Action> {
        let mut actions = Vec::new();
        for pot in PotId::ALL {
            let i = pot.index();
            if self.state.plan.pots[i].source != PlanSource::ThresholdFallback {
                continue;
            }
            let desired = auto_decision(&snap.soil_adc, pot, self.state.threshold[i]);
            if desired != snap.relay[i] {
                actions.push(Action::Send(Command::Relay {
                    relay: pot,
                    state: desired,
                }));
            }
        }
        actions
    }

    /// Operator link dropped or returned. The mode never changes here.
    pub fn on_connectivity_change(&mut self, connected: bool) -> Vec<Action> {
        if connected == self.state.connected {
            return Vec::new();
        }
        self.state.connected = connected;
        let mode = self.state.current_mode;
        let mut actions = Vec::new();
        if !connected {
            actions.push(self.notify(
                NotificationKind::ConnectivityChanged,
                None,
                format!("operator link lost; continuing in {mode} mode"),
            ));
            if mode == Mode::Manual {
                self.pending_manual.clear();
                for pot in PotId::ALL {
                    actions.push(Action::Send(Command::Relay {
                        relay: pot,
                        state: RelayState::Off,
                    }));
                }
            }
        } else {
            if self.state.last_mode == mode {
                actions.push(Action::Send(Command::Mode(mode)));
            }
            for (i, counts) in self.effective_thresholds().into_iter().enumerate() {
                actions.push(Action::Send(Command::Threshold {
                    relay: PotId::ALL[i],
                    counts,
                }));
            }
            actions.push(self.notify(
                NotificationKind::ConnectivityChanged,
                None,
                format!("operator link restored; state resynchronised in {mode} mode"),
            ));
        }
        actions
    }
}
