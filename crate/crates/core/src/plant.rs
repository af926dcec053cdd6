//! Seedable stand-in for the greenhouse: diurnal weather with random rain
//! events, a leaky-bucket soil model per pot, and the transducer models that
//! turn physical state into sensor readings.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::domain::{Rain, RelayState, ADC_MAX, POT_COUNT};

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Flow-sensor pulse frequency per L/min of flow.
pub const FLOW_HZ_PER_LPM: f64 = 7.5;

/// Upper end of the flow sensor's working range (L/min).
pub const FLOW_SENSOR_MAX_LPM: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherState {
    pub temperature_c: f64,
    pub humidity_pct: f64,
    pub raining: bool,
    /// Water added to the soil while raining, volumetric fraction per second.
    pub rain_rate: f64,
}

impl WeatherState {
    pub fn rain(&self) -> Rain {
        if self.raining {
            Rain::Wet
        } else {
            Rain::Dry
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotState {
    /// Volumetric water fraction, always within `[0, m_sat]`.
    pub moisture: f64,
    pub m_sat: f64,
}

impl PotState {
    pub fn new(moisture: f64, m_sat: f64) -> PotState {
        PotState {
            moisture: moisture.clamp(0.0, m_sat),
            m_sat,
        }
    }
}

/// The `[sim]` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Seconds of simulated time per tick (1..=10).
    pub dt: u64,
    /// Evaporation coefficient, fraction per °C above `t0` per second.
    pub e0: f64,
    /// Temperature at which evaporation starts, °C.
    pub t0: f64,
    /// Drainage rate, per second.
    pub d: f64,
    /// Inflow while a pot's valve is open, fraction per second.
    pub q_irr: f64,
    pub m_sat: f64,
    pub initial_moisture: [f64; POT_COUNT],
    /// Soil ADC counts at zero moisture.
    pub adc_dry: u16,
    /// Soil ADC counts at saturation.
    pub adc_wet: u16,
    /// Standard deviation of soil-sensor noise, counts.
    pub noise_sigma: f64,
    pub pulses_per_l: f64,
    pub lpm_per_valve: f64,
    pub t_mean: f64,
    pub t_amp: f64,
    pub h_mean: f64,
    pub h_amp: f64,
    /// Expected number of rain events per simulated day.
    pub rain_events_per_day: f64,
    pub rain_mean_duration_s: f64,
    /// Water added while raining, fraction per second.
    pub rain_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1,
            e0: 3.0e-7,
            t0: 5.0,
            d: 2.0e-6,
            q_irr: 5.0e-4,
            m_sat: 0.45,
            initial_moisture: [0.35, 0.30, 0.25],
            adc_dry: 3500,
            adc_wet: 1200,
            noise_sigma: 8.0,
            pulses_per_l: FLOW_HZ_PER_LPM * 60.0,
            lpm_per_valve: 2.0,
            t_mean: 24.0,
            t_amp: 6.0,
            h_mean: 55.0,
            h_amp: 15.0,
            rain_events_per_day: 0.5,
            rain_mean_duration_s: 1800.0,
            rain_rate: 2.0e-5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &'static str, why: &str| {
            Err(ConfigError::Invalid {
                section: "sim",
                field,
                reason: why.to_string(),
            })
        };
        if self.dt == 0 || self.dt > 10 {
            return bad("dt", "must be between 1 and 10 seconds");
        }
        if !(self.m_sat > 0.0 && self.m_sat <= 1.0) {
            return bad("m_sat", "must lie in (0, 1]");
        }
        if self.adc_dry <= self.adc_wet {
            return bad("adc_dry", "must exceed adc_wet");
        }
        if self.adc_dry > ADC_MAX {
            return bad("adc_dry", "exceeds the 12-bit ADC range");
        }
        if !(self.lpm_per_valve > 0.0
            && self.lpm_per_valve * POT_COUNT as f64 <= FLOW_SENSOR_MAX_LPM)
        {
            return bad("lpm_per_valve", "total flow must stay within 0..30 L/min");
        }
        if !(self.pulses_per_l > 0.0) {
            return bad("pulses_per_l", "must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be a finite non-negative number");
        }
        for (field, v) in [
            ("e0", self.e0),
            ("d", self.d),
            ("q_irr", self.q_irr),
            ("rain_rate", self.rain_rate),
            ("rain_events_per_day", self.rain_events_per_day),
            ("t_amp", self.t_amp),
            ("h_amp", self.h_amp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, "must be a finite non-negative number");
            }
        }
        if !(self.rain_mean_duration_s > 0.0) {
            return bad("rain_mean_duration_s", "must be positive");
        }
        if self
            .initial_moisture
            .iter()
            .any(|m| !(0.0..=self.m_sat).contains(m))
        {
            return bad("initial_moisture", "each value must lie in [0, m_sat]");
        }
        Ok(())
    }

    /// Moisture fraction added to one pot per liter delivered to it.
    pub fn moisture_per_liter(&self) -> f64 {
        self.q_irr * 60.0 / self.lpm_per_valve
    }

    pub fn initial_weather(&self) -> WeatherState {
        WeatherState {
            temperature_c: self.t_mean,
            humidity_pct: self.h_mean.clamp(0.0, 100.0),
            raining: false,
            rain_rate: 0.0,
        }
    }

    pub fn initial_pots(&self) -> [PotState; POT_COUNT] {
        self.initial_moisture.map(|m| PotState::new(m, self.m_sat))
    }
}

/// Advances the weather to time `t`. Temperature and humidity follow the
/// diurnal sinusoid exactly; rain starts and stops as a two-state Markov
/// chain sampled once per tick.
pub fn step_weather<R: Rng + ?Sized>(
    w: &WeatherState,
    t: u64,
    cfg: &SimConfig,
    rng: &mut R,
) -> WeatherState {
    let phase = (2.0 * PI * t as f64 / SECONDS_PER_DAY).sin();
    let temperature_c = cfg.t_mean + cfg.t_amp * phase;
    let humidity_pct = (cfg.h_mean - cfg.h_amp * phase).clamp(0.0, 100.0);

    let dt = cfg.dt as f64;
    let raining = if w.raining {
        let p_stop = (dt / cfg.rain_mean_duration_s).min(1.0);
        !(rng.random::<f64>() < p_stop)
    } else {
        let p_start = (cfg.rain_events_per_day * dt / SECONDS_PER_DAY).min(1.0);
        p_start > 0.0 && rng.random::<f64>() < p_start
    };

    WeatherState {
        temperature_c,
        humidity_pct,
        raining,
        rain_rate: if raining { cfg.rain_rate } else { 0.0 },
    }
}

/// Net moisture rate (fraction per second) before clamping.
pub fn moisture_rate(p: &PotState, w: &WeatherState, valve_open: bool, cfg: &SimConfig) -> f64 {
    let irrigation = if valve_open { cfg.q_irr } else { 0.0 };
    let rain = if w.raining { w.rain_rate } else { 0.0 };
    let evaporation =
        cfg.e0 * (w.temperature_c - cfg.t0).max(0.0) * (1.0 - w.humidity_pct / 100.0);
    irrigation + rain - evaporation - cfg.d * p.moisture
}

/// One explicit-Euler step of the leaky-bucket balance, clamped to
/// `[0, m_sat]`.
pub fn step_pot(p: &PotState, w: &WeatherState, valve_open: bool, cfg: &SimConfig) -> PotState {
    let next = p.moisture + cfg.dt as f64 * moisture_rate(p, w, valve_open, cfg);
    PotState {
        moisture: next.clamp(0.0, p.m_sat),
        m_sat: p.m_sat,
    }
}

/// Noise-free transducer curve: linear from `adc_dry` at zero moisture down to
/// `adc_wet` at saturation.
pub fn soil_adc_ideal(p: &PotState, cfg: &SimConfig) -> f64 {
    let dry = f64::from(cfg.adc_dry);
    let wet = f64::from(cfg.adc_wet);
    dry - (dry - wet) * (p.moisture / p.m_sat)
}

/// Reads one of the pot's two probes. Each call draws fresh noise, so the two
/// channels of a pot are independent.
pub fn read_soil_adc<R: Rng + ?Sized>(p: &PotState, cfg: &SimConfig, rng: &mut R) -> u16 {
    let noise = if cfg.noise_sigma > 0.0 {
        Normal::new(0.0, cfg.noise_sigma)
            .expect("validated sigma")
            .sample(rng)
    } else {
        0.0
    };
    (soil_adc_ideal(p, cfg) + noise)
        .round()
        .clamp(0.0, f64::from(ADC_MAX)) as u16
}

/// Flow through the shared supply line: every open valve passes
/// `lpm_per_valve`. Returns `(flow_lpm, pulse_hz)`.
pub fn read_flow(relays: &[RelayState; POT_COUNT], cfg: &SimConfig) -> (f64, f64) {
    let open = relays.iter().filter(|r| r.is_on()).count();
    let flow_lpm = cfg.lpm_per_valve * open as f64;
    (flow_lpm, flow_lpm * cfg.pulses_per_l / 60.0)
}

/// DHT11 model: truncates to whole units and clamps to the sensor's band
/// (0..50 °C, 20..90 %RH).
pub fn read_dht(w: &WeatherState) -> (i32, i32) {
    let t = (w.temperature_c.trunc() as i32).clamp(0, 50);
    let h = (w.humidity_pct.trunc() as i32).clamp(20, 90);
    (t, h)
}
