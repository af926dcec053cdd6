//! Emulation of the device firmware: boot, the periodic loop, on-device AUTO
//! thresholding, serial command handling and telemetry emission.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::bus::SerialBus;
use crate::config::ConfigError;
use crate::domain::{
    zone_average, Mode, PotId, Rain, RelayState, SensorSnapshot, ADC_MAX, POT_COUNT,
    SOIL_CHANNELS,
};
use crate::protocol::{encode_telemetry, parse_command, Command};

pub const DEFAULT_THRESHOLD: u16 = 2500;

/// The `[firmware]` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirmwareConfig {
    /// Seconds between telemetry frames.
    pub send_interval: u64,
    pub thresholds: [u16; POT_COUNT],
    /// Compatibility with single-threshold firmware: when set, all three
    /// relays use this value and `thresholds` is ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub single_threshold: Option<u16>,
}

impl Default for FirmwareConfig {
    fn default() -> Self {
        FirmwareConfig {
            send_interval: 2,
            thresholds: [DEFAULT_THRESHOLD; POT_COUNT],
            single_threshold: None,
        }
    }
}

impl FirmwareConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.send_interval == 0 {
            return Err(ConfigError::Invalid {
                section: "firmware",
                field: "send_interval",
                reason: "must be at least 1 second".into(),
            });
        }
        let all = self.effective_thresholds();
        if all.iter().any(|t| *t > ADC_MAX) {
            return Err(ConfigError::Invalid {
                section: "firmware",
                field: "thresholds",
                reason: format!("must lie in 0..={ADC_MAX}"),
            });
        }
        Ok(())
    }

    pub fn effective_thresholds(&self) -> [u16; POT_COUNT] {
        match self.single_threshold {
            Some(t) => [t; POT_COUNT],
            None => self.thresholds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareState {
    pub mode: Mode,
    pub threshold: [u16; POT_COUNT],
    pub relay: [RelayState; POT_COUNT],
    pub last_send: u64,
    pub send_interval: u64,
    pub manual_relay_request: [RelayState; POT_COUNT],
    /// Command lines that failed to parse since boot.
    pub malformed_commands: u64,
}

/// Boot: relays OFF (pins HIGH), AUTO mode, configured thresholds.
pub fn setup(cfg: &FirmwareConfig) -> FirmwareState {
    FirmwareState {
        mode: Mode::Auto,
        threshold: cfg.effective_thresholds(),
        relay: [RelayState::Off; POT_COUNT],
        last_send: 0,
        send_interval: cfg.send_interval,
        manual_relay_request: [RelayState::Off; POT_COUNT],
        malformed_commands: 0,
    }
}

/// The AUTO rule for one relay: ON iff the floor mean of its probes is
/// strictly above the threshold.
pub fn auto_decision(soil_adc: &[u16; SOIL_CHANNELS], pot: PotId, threshold: u16) -> RelayState {
    RelayState::from_bool(zone_average(soil_adc, pot) > threshold)
}

/// AUTO thresholds each relay; MANUAL copies the operator's requests; AI
/// leaves relays to backend commands.
pub fn update_relays(s: &mut FirmwareState, soil_adc: &[u16; SOIL_CHANNELS]) {
    match s.mode {
        Mode::Auto => {
            for pot in PotId::ALL {
                s.relay[pot.relay_channel()] =
                    auto_decision(soil_adc, pot, s.threshold[pot.index()]);
            }
        }
        Mode::Manual => s.relay = s.manual_relay_request,
        Mode::Ai => {}
    }
}

/// Applies one parsed command.
pub fn apply_command(s: &mut FirmwareState, cmd: Command) {
    match cmd {
        Command::Mode(m) => {
            if m != s.mode {
                s.mode = m;
                // a new mode starts from a clean slate
                s.relay = [RelayState::Off; POT_COUNT];
                s.manual_relay_request = [RelayState::Off; POT_COUNT];
            }
        }
        Command::Threshold { relay, counts } => s.threshold[relay.index()] = counts,
        Command::Relay { relay, state } => {
            s.manual_relay_request[relay.index()] = state;
            if s.mode == Mode::Ai {
                s.relay[relay.index()] = state;
            }
        }
    }
}

/// Applies each line in order. Malformed lines are skipped, counted and
/// logged. Returns the number of malformed lines.
pub fn handle_serial_commands<'a, I>(s: &mut FirmwareState, lines: I) -> usize
where
    I: IntoIterator<Item = &'a str>,
{
    let mut malformed = 0;
    for line in lines {
        match parse_command(line) {
            Ok(cmd) => apply_command(s, cmd),
            Err(e) => {
                warn!(line = line.trim_end(), error = %e, "dropping malformed command");
                malformed += 1;
            }
        }
    }
    s.malformed_commands += malformed as u64;
    malformed
}

/// Whatever the device can sense on one loop iteration.
pub trait DeviceSensors {
    fn soil(&mut self) -> [u16; SOIL_CHANNELS];
    /// `None` when the DHT could not be read.
    fn dht(&mut self) -> Option<(i32, i32)>;
    fn rain(&mut self) -> Rain;
    /// Flow through the supply line given the relay states now applied.
    fn flow_lpm(&mut self, relays: &[RelayState; POT_COUNT]) -> f64;
}

/// Builds the snapshot that `send_sensor_data` serializes.
pub fn snapshot<S: DeviceSensors + ?Sized>(
    s: &FirmwareState,
    now: u64,
    soil_adc: [u16; SOIL_CHANNELS],
    sensors: &mut S,
) -> SensorSnapshot {
    let dht = sensors.dht();
    SensorSnapshot {
        timestamp: now,
        temperature_c: dht.map(|d| d.0),
        humidity_pct: dht.map(|d| d.1),
        rain: sensors.rain(),
        flow_lpm: sensors.flow_lpm(&s.relay),
        soil_adc,
        relay: s.relay,
        mode: s.mode,
    }
}

/// One telemetry line for the snapshot. The snapshot already carries the
/// relay and mode info, so `_s` is only here to mirror the device routine.
pub fn send_sensor_data(_s: &FirmwareState, snap: &SensorSnapshot) -> String {
    encode_telemetry(snap)
}

/// Whether the telemetry timer has expired: strictly more than one interval
/// since the last send.
pub fn telemetry_due(s: &FirmwareState, now: u64) -> bool {
    now.saturating_sub(s.last_send) > s.send_interval
}

/// One pass of the firmware main loop at simulation time `now`: drain serial
/// commands, update relays from a fresh soil reading, and emit a frame when
/// the timer has expired. The frame reports the same soil reading the relay
/// decision used.
pub fn loop_iteration<S: DeviceSensors + ?Sized>(
    s: &mut FirmwareState,
    now: u64,
    sensors: &mut S,
    bus: &mut SerialBus,
) -> Option<SensorSnapshot> {
    let mut lines = Vec::new();
    while let Some(line) = bus.device_read_line() {
        lines.push(line);
    }
    handle_serial_commands(s, lines.iter().map(String::as_str));

    let soil = sensors.soil();
    update_relays(s, &soil);

    if !telemetry_due(s, now) {
        return None;
    }
    // Advance the schedule by one interval, but never leave it so far behind
    // that the next frame would follow sooner than one interval.
    s.last_send = (s.last_send + s.send_interval).max(now.saturating_sub(1));
    let snap = snapshot(s, now, soil, sensors);
    bus.device_write(send_sensor_data(s, &snap));
    Some(snap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse_telemetry;
    use RelayState::{Off, On};

    struct Fixed {
        soil: [u16; SOIL_CHANNELS],
    }

    impl DeviceSensors for Fixed {
        fn soil(&mut self) -> [u16; SOIL_CHANNELS] {
            self.soil
        }
        fn dht(&mut self) -> Option<(i32, i32)> {
            Some((24, 55))
        }
        fn rain(&mut self) -> Rain {
            Rain::Dry
        }
        fn flow_lpm(&mut self, relays: &[RelayState; POT_COUNT]) -> f64 {
            2.0 * relays.iter().filter(|r| r.is_on()).count() as f64
        }
    }

    fn boot() -> FirmwareState {
        setup(&FirmwareConfig::default())
    }

    #[test]
    fn setup_defaults() {
        let s = boot();
        assert_eq!(s.relay, [Off; 3]);
        assert!(s.relay.iter().all(|r| r.level() == crate::domain::Level::High));
        assert_eq!(s.mode, Mode::Auto);
        assert_eq!(s.threshold, [2500; 3]);
        assert_eq!(s.last_send, 0);
    }

    #[test]
    fn single_threshold_compat() {
        let cfg = FirmwareConfig {
            single_threshold: Some(2100),
            ..FirmwareConfig::default()
        };
        assert_eq!(setup(&cfg).threshold, [2100; 3]);
    }

    #[test]
    fn auto_thresholding() {
        let mut s = boot();
        update_relays(&mut s, &[3000, 3000, 2500, 2500, 2501, 2500]);
        // pot 2: floor((2501 + 2500) / 2) = 2500, not above the threshold
        assert_eq!(s.relay, [On, Off, Off]);
        assert_eq!(s.relay[0].level(), crate::domain::Level::Low);
    }

    #[test]
    fn ai_mode_leaves_relays_alone() {
        let mut s = boot();
        apply_command(&mut s, Command::Mode(Mode::Ai));
        apply_command(
            &mut s,
            Command::Relay {
                relay: PotId::ALL[1],
                state: On,
            },
        );
        let before = s.relay;
        update_relays(&mut s, &[4000; 6]);
        assert_eq!(s.relay, before);
        update_relays(&mut s, &[0; 6]);
        assert_eq!(s.relay, [Off, On, Off]);
    }

    #[test]
    fn serial_commands() {
        let mut s = boot();
        let bad = handle_serial_commands(
            &mut s,
            ["MODE 3", "THRESHOLD 1 2600", "RELAY 0 ON", "garbage", "RELAY 9 ON"],
        );
        assert_eq!(bad, 2);
        assert_eq!(s.malformed_commands, 2);
        assert_eq!(s.mode, Mode::Manual);
        assert_eq!(s.threshold[1], 2600);
        assert_eq!(s.manual_relay_request[0], On);
        update_relays(&mut s, &[0; 6]);
        assert_eq!(s.relay, [On, Off, Off]);

        handle_serial_commands(&mut s, ["MODE 2"]);
        assert_eq!(s.mode, Mode::Auto);
        assert_eq!(s.manual_relay_request, [Off; 3]);
    }

    #[test]
    fn telemetry_timer_is_strict() {
        let mut bus = SerialBus::new();
        let mut sensors = Fixed { soil: [2000; 6] };
        let mut s = boot();
        // now - last_send == interval: nothing
        assert!(loop_iteration(&mut s, 2, &mut sensors, &mut bus).is_none());
        // interval + 1: one frame
        assert!(loop_iteration(&mut s, 3, &mut sensors, &mut bus).is_some());
        // within the next interval: nothing more
        assert!(loop_iteration(&mut s, 4, &mut sensors, &mut bus).is_none());
        assert_eq!(bus.host_read_lines().len(), 1);
    }

    #[test]
    fn frame_period_never_below_interval() {
        for (dt, interval) in [(1u64, 2u64), (3, 5), (10, 2), (1, 1), (7, 20), (2, 3)] {
            let mut bus = SerialBus::new();
            let mut sensors = Fixed { soil: [2000; 6] };
            let mut s = setup(&FirmwareConfig {
                send_interval: interval,
                ..FirmwareConfig::default()
            });
            let mut sent = Vec::new();
            let mut now = 0;
            while now < 2000 {
                now += dt;
                if let Some(f) = loop_iteration(&mut s, now, &mut sensors, &mut bus) {
                    sent.push(f.timestamp);
                }
            }
            for w in sent.windows(2) {
                assert!(w[1] - w[0] >= interval, "dt={dt} interval={interval}: {w:?}");
            }
            if dt == 1 {
                assert!(sent.windows(2).all(|w| w[1] - w[0] == interval));
            }
        }
    }

    #[test]
    fn frame_matches_state() {
        let mut bus = SerialBus::new();
        let mut sensors = Fixed {
            soil: [3000, 2980, 2100, 2120, 2600, 2590],
        };
        let mut s = boot();
        let snap = loop_iteration(&mut s, 100, &mut sensors, &mut bus).unwrap();
        let lines = bus.host_read_lines();
        assert_eq!(
            lines,
            vec!["{\"ts\":100,\"temp\":24,\"hum\":55,\"rain\":0,\"flow\":4.0,\"soil\":[3000,2980,2100,2120,2600,2590],\"relay\":[1,0,1],\"mode\":2}\n"]
        );
        assert_eq!(parse_telemetry(&lines[0]).unwrap(), snap);
    }

    #[test]
    fn commands_arrive_through_the_bus() {
        let mut bus = SerialBus::new();
        let mut sensors = Fixed { soil: [3000; 6] };
        let mut s = boot();
        bus.host_write("THRESHOLD 0 3500");
        loop_iteration(&mut s, 1, &mut sensors, &mut bus);
        assert_eq!(s.relay, [Off, On, On]);
    }
}
