//! The closed loop: weather and pots, the emulated firmware on a serial bus,
//! and the backend controller, all advanced on one simulated clock.
//!
//! Each step runs in a fixed order: weather, firmware loop (commands, relay
//! update, maybe a frame), water bookkeeping, soil dynamics, controller
//! (frames, then the clock tick). Commands the controller issues reach the
//! firmware on the next step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bus::SerialBus;
use crate::config::SystemConfig;
use crate::controller::{Action, Controller, ForecastSource, Rejection};
use crate::domain::{
    Mode, Notification, PotId, Rain, RelayState, SensorSnapshot, POT_COUNT, SOIL_CHANNELS,
};
use crate::firmware::{loop_iteration, setup, DeviceSensors, FirmwareState};
use crate::plant::{
    moisture_rate, read_dht, read_flow, read_soil_adc, step_pot, step_weather, PotState,
    SimConfig, WeatherState,
};
use crate::protocol::{parse_telemetry, Command};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// A soil channel reads a constant value.
    SoilStuck { channel: usize, value: u16 },
    DhtUnreadable,
}

/// A sensor fault active over `[from, until)` in simulation seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    pub from: u64,
    pub until: Option<u64>,
}

impl Fault {
    fn active(&self, now: u64) -> bool {
        now >= self.from && self.until.is_none_or(|u| now < u)
    }
}

/// Water accounting. `delivered_l` comes from the flow sensor's pulse count;
/// `irrigation_gain` is the moisture the valves added before clamping.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WaterLedger {
    pub delivered_l: [f64; POT_COUNT],
    pub irrigation_gain: [f64; POT_COUNT],
    /// Moisture integrated without clamping.
    pub unclamped_moisture: [f64; POT_COUNT],
    pub relay_on_s: [u64; POT_COUNT],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub duration_s: u64,
    pub frames: u64,
    pub water_l: [f64; POT_COUNT],
    pub total_water_l: f64,
    /// Fraction of simulated time each relay was ON.
    pub duty: [f64; POT_COUNT],
    pub final_moisture: [f64; POT_COUNT],
    pub notifications: u64,
}

/// What one step produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub now: u64,
    pub frame: Option<SensorSnapshot>,
    pub notifications: Vec<Notification>,
    pub commands: Vec<Command>,
}

struct TwinSensors<'a> {
    now: u64,
    pots: &'a [PotState; POT_COUNT],
    weather: &'a WeatherState,
    cfg: &'a SimConfig,
    rng: &'a mut ChaCha8Rng,
    faults: &'a [Fault],
}

impl DeviceSensors for TwinSensors<'_> {
    fn soil(&mut self) -> [u16; SOIL_CHANNELS] {
        let mut out = [0u16; SOIL_CHANNELS];
        for (ch, slot) in out.iter_mut().enumerate() {
            // always draw, so a fault does not shift the noise of later readings
            *slot = read_soil_adc(&self.pots[ch / 2], self.cfg, self.rng);
        }
        for f in self.faults.iter().filter(|f| f.active(self.now)) {
            if let FaultKind::SoilStuck { channel, value } = f.kind {
                out[channel] = value;
            }
        }
        out
    }

    fn dht(&mut self) -> Option<(i32, i32)> {
        let dead = self
            .faults
            .iter()
            .any(|f| f.active(self.now) && f.kind == FaultKind::DhtUnreadable);
        (!dead).then(|| read_dht(self.weather))
    }

    fn rain(&mut self) -> Rain {
        self.weather.rain()
    }

    fn flow_lpm(&mut self, relays: &[RelayState; POT_COUNT]) -> f64 {
        read_flow(relays, self.cfg).0
    }
}

pub struct Twin {
    sim: SimConfig,
    clock: u64,
    weather: WeatherState,
    pots: [PotState; POT_COUNT],
    firmware: FirmwareState,
    bus: SerialBus,
    controller: Controller,
    weather_rng: ChaCha8Rng,
    sensor_rng: ChaCha8Rng,
    faults: Vec<Fault>,
    water: WaterLedger,
    frames: u64,
    notifications: u64,
    rejected_frames: u64,
    pending: Vec<Action>,
}

impl Twin {
    pub fn new(cfg: &SystemConfig, seed: u64) -> Twin {
        let mut sensor_rng = ChaCha8Rng::seed_from_u64(seed);
        sensor_rng.set_stream(1);
        let pots = cfg.sim.initial_pots();
        let firmware = setup(&cfg.firmware);
        Twin {
            sim: cfg.sim.clone(),
            clock: 0,
            weather: cfg.sim.initial_weather(),
            water: WaterLedger {
                unclamped_moisture: pots.map(|p| p.moisture),
                ..WaterLedger::default()
            },
            pots,
            controller: Controller::new(cfg.controller.clone(), firmware.threshold),
            firmware,
            bus: SerialBus::new(),
            weather_rng: ChaCha8Rng::seed_from_u64(seed),
            sensor_rng,
            faults: Vec::new(),
            frames: 0,
            notifications: 0,
            rejected_frames: 0,
            pending: Vec::new(),
        }
    }

    pub fn with_forecaster(mut self, source: Box<dyn ForecastSource>) -> Twin {
        self.controller = self.controller.with_forecaster(source);
        self
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn firmware(&self) -> &FirmwareState {
        &self.firmware
    }

    pub fn pots(&self) -> &[PotState; POT_COUNT] {
        &self.pots
    }

    pub fn weather(&self) -> &WeatherState {
        &self.weather
    }

    pub fn water(&self) -> &WaterLedger {
        &self.water
    }

    /// Frames the controller could not parse.
    pub fn rejected_frames(&self) -> u64 {
        self.rejected_frames
    }

    pub fn inject(&mut self, fault: Fault) {
        self.faults.push(fault);
    }

    pub fn set_mode(&mut self, mode: Mode) -> Result<(), Rejection> {
        self.controller.set_mode(mode)
    }

    pub fn manual_valve(&mut self, pot: PotId, state: RelayState) -> Result<(), Rejection> {
        let actions = self.controller.manual_valve(pot, state)?;
        self.pending.extend(actions);
        Ok(())
    }

    pub fn set_threshold(&mut self, pot: PotId, counts: u32) -> Result<(), Rejection> {
        let actions = self.controller.set_threshold(pot, counts)?;
        self.pending.extend(actions);
        Ok(())
    }

    pub fn set_connected(&mut self, connected: bool) {
        let actions = self.controller.on_connectivity_change(connected);
        self.pending.extend(actions);
    }

    /// Advances the loop by one tick of `dt` seconds.
    pub fn step(&mut self) -> StepReport {
        let dt = self.sim.dt;
        let mut report = StepReport::default();
        // operator actions since the last step go out first
        let pending = std::mem::take(&mut self.pending);
        self.apply(pending, &mut report);

        self.clock += dt;
        let now = self.clock;
        report.now = now;
        self.weather = step_weather(&self.weather, now, &self.sim, &mut self.weather_rng);

        let mut sensors = TwinSensors {
            now,
            pots: &self.pots,
            weather: &self.weather,
            cfg: &self.sim,
            rng: &mut self.sensor_rng,
            faults: &self.faults,
        };
        loop_iteration(&mut self.firmware, now, &mut sensors, &mut self.bus);

        let relays = self.firmware.relay;
        let (_, pulse_hz) = read_flow(&relays, &self.sim);
        let liters = pulse_hz * dt as f64 / self.sim.pulses_per_l;
        let open = relays.iter().filter(|r| r.is_on()).count();
        for i in 0..POT_COUNT {
            let on = relays[i].is_on();
            if on {
                self.water.delivered_l[i] += liters / open as f64;
                self.water.irrigation_gain[i] += self.sim.q_irr * dt as f64;
                self.water.relay_on_s[i] += dt;
            }
            self.water.unclamped_moisture[i] +=
                dt as f64 * moisture_rate(&self.pots[i], &self.weather, on, &self.sim);
            self.pots[i] = step_pot(&self.pots[i], &self.weather, on, &self.sim);
        }

        let mut actions = Vec::new();
        for line in self.bus.host_read_lines() {
            match parse_telemetry(&line) {
                Ok(snap) => {
                    self.frames += 1;
                    report.frame = Some(snap.clone());
                    actions.extend(self.controller.on_telemetry(snap));
                }
                Err(e) => {
                    self.rejected_frames += 1;
                    tracing::warn!(error = %e, "dropping malformed frame");
                }
            }
        }
        actions.extend(self.controller.tick(now));
        self.apply(actions, &mut report);
        report
    }

    fn apply(&mut self, actions: Vec<Action>, report: &mut StepReport) {
        for action in actions {
            match action {
                Action::Send(cmd) => {
                    self.bus.host_write(cmd.to_line());
                    report.commands.push(cmd);
                }
                Action::Notify(n) => {
                    self.notifications += 1;
                    report.notifications.push(n);
                }
            }
        }
    }

    /// Steps until at least `duration` more seconds have elapsed, handing
    /// every report to `sink`.
    pub fn run(&mut self, duration: u64, mut sink: impl FnMut(&StepReport)) {
        let end = self.clock + duration;
        while self.clock < end {
            let report = self.step();
            sink(&report);
        }
    }

    pub fn summary(&self) -> Summary {
        let water_l = self.water.delivered_l;
        let elapsed = self.clock.max(1) as f64;
        Summary {
            duration_s: self.clock,
            frames: self.frames,
            water_l,
            total_water_l: water_l.iter().sum(),
            duty: self.water.relay_on_s.map(|s| s as f64 / elapsed),
            final_moisture: self.pots.map(|p| p.moisture),
            notifications: self.notifications,
        }
    }
}
