//! Acceptance suite. Runs as a plain binary so every criterion prints one
//! `PASS`/`FAIL` line regardless of output capture; exits non-zero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use drip_cli::{eval, history_path, simulate, train, train_config};
use drip_core::bus::SerialBus;
use drip_core::domain::{
    Level, Mode, NotificationKind, PotId, Rain, RelayState, SensorSnapshot, POT_COUNT,
    SOIL_CHANNELS,
};
use drip_core::firmware::{loop_iteration, setup, DeviceSensors, FirmwareConfig};
use drip_core::protocol::{encode_telemetry, parse_command, parse_telemetry, parse_telemetry_bytes};
use drip_core::store::{split, to_dataset, FEATURES};
use drip_core::twin::{Fault, FaultKind, Twin};
use drip_core::SystemConfig;
use drip_forecast::model::{batch_loss, dropout_mask, loss_and_gradient, Params, Shapes};
use drip_forecast::Sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Central differences of the parameter at `k`, or `None` when the loss has a
/// kink (a ReLU switching) inside `[θ−h, θ+h]`, detected as one-sided slopes
/// that disagree.
fn central_difference(p: &mut Params, k: usize, batch: &[&Sample], masks: &[Vec<f64>]) -> Option<f64> {
    let h = 1e-5;
    let orig = p.data[k];
    let base = batch_loss(p, batch, Some(masks));
    p.data[k] = orig + h;
    let up = batch_loss(p, batch, Some(masks));
    p.data[k] = orig - h;
    let down = batch_loss(p, batch, Some(masks));
    p.data[k] = orig;
    let (right, left) = ((up - base) / h, (base - down) / h);
    ((right - left).abs() < 1e-3).then(|| (up - down) / (2.0 * h))
}

fn gradient_check() -> Outcome {
    const DRAWS: usize = 100;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let shapes = Shapes::new(4, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0xD21F);
    let mut worst: f64 = 0.0;
    let (mut smooth, mut kinked, mut components) = (0, 0, 0);
    'draws: while smooth < DRAWS {
        let mut p = Params::init(shapes, &mut rng);
        for v in &mut p.data {
            *v *= rng.random_range(0.5..2.0);
        }
        let samples: Vec<Sample> = (0..4)
            .map(|_| Sample {
                x: (0..3)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                    .collect::<Vec<[f64; FEATURES]>>(),
                y: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let masks: Vec<Vec<f64>> = (0..4).map(|_| dropout_mask(4, 0.2, &mut rng)).collect();
        let (_, grad) = loss_and_gradient(&p, &batch, Some(&masks));
        let mut draw_worst: f64 = 0.0;
        for k in 0..p.data.len() {
            let Some(numeric) = central_difference(&mut p, k, &batch, &masks) else {
                kinked += 1;
                continue 'draws;
            };
            let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
            draw_worst = draw_worst.max(rel);
        }
        worst = worst.max(draw_worst);
        components += p.data.len();
        smooth += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "max rel err {worst:.2e} over {DRAWS} draws ({components} components, {kinked} draws with a ReLU kink inside ±h redrawn), {secs:.2}s"
    );
    ensure!(worst < TOL, "{detail}, need < {TOL:e}");
    ensure!(secs < 10.0, "{detail}, need < 10 s");
    Ok(detail)
}

/// The forecast-gate configuration: frames once a minute, so a 60-frame
/// window covers an hour and the horizon half an hour.
const GATE_CONFIG: &str = "\
[firmware]
send_interval = 60

[train]
hidden = 16
epochs = 30
seed = 1
";

fn forecast_gate(dir: &Path) -> Outcome {
    const GATE: f64 = 0.1;
    let start = Instant::now();
    let cfg = SystemConfig::from_toml(GATE_CONFIG).map_err(|e| e.to_string())?;
    let log = dir.join("gate.jsonl");
    simulate(&cfg, 3 * 86_400, 7, &log).map_err(|e| format!("{e:#}"))?;
    let tcfg = train_config(&cfg, None, None);
    ensure!(tcfg.hidden == 16 && tcfg.epochs <= 100, "gate config drifted");
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for pot in PotId::ALL {
        let (_, path) = train(&log, pot, &tcfg, dir).map_err(|e| format!("{e:#}"))?;
        let r = eval(&path, &log).map_err(|e| format!("{e:#}"))?;
        worst = worst.max(r.mae);
        parts.push(format!("{pot} {:.4} ({:.1} counts)", r.mae, r.mae_counts));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("test MAE {}, {secs:.1}s", parts.join(", "));
    ensure!(worst < GATE, "{detail}; need < {GATE}");
    ensure!(secs < 300.0, "{detail}; need < 300 s");
    Ok(detail)
}

struct Fixed([u16; SOIL_CHANNELS]);

impl DeviceSensors for Fixed {
    fn soil(&mut self) -> [u16; SOIL_CHANNELS] {
        self.0
    }
    fn dht(&mut self) -> Option<(i32, i32)> {
        Some((22, 50))
    }
    fn rain(&mut self) -> Rain {
        Rain::Dry
    }
    fn flow_lpm(&mut self, relays: &[RelayState; POT_COUNT]) -> f64 {
        2.0 * relays.iter().filter(|r| r.is_on()).count() as f64
    }
}

fn auto_oracle() -> Outcome {
    let start = Instant::now();
    let mut values: Vec<u16> = (0..4096).step_by(64).map(|v| v as u16).collect();
    values.push(4095);
    let mut checks = 0u64;
    for threshold in [0u16, 2500, 4095] {
        let cfg = FirmwareConfig {
            thresholds: [threshold; POT_COUNT],
            ..FirmwareConfig::default()
        };
        for pot in PotId::ALL {
            for &a in &values {
                for &b in &values {
                    let mut state = setup(&cfg);
                    state.send_interval = 0;
                    let mut soil = [2000u16; SOIL_CHANNELS];
                    soil[2 * pot.index()] = a;
                    soil[2 * pot.index() + 1] = b;
                    let mut bus = SerialBus::new();
                    let frame = loop_iteration(&mut state, 1, &mut Fixed(soil), &mut bus)
                        .ok_or("no frame emitted")?;
                    let avg = ((f64::from(a) + f64::from(b)) / 2.0).floor();
                    let expect_on = avg > f64::from(threshold);
                    let relay = state.relay[pot.index()];
                    ensure!(
                        relay.is_on() == expect_on,
                        "{pot} soil ({a},{b}) threshold {threshold}: relay {relay}"
                    );
                    // active-low drive: ON is a LOW pin
                    ensure!(
                        (relay.level() == Level::Low) == expect_on,
                        "{pot} soil ({a},{b}): pin level {:?}",
                        relay.level()
                    );
                    let wire = parse_telemetry(&bus.host_read_lines()[0]).map_err(|e| e.to_string())?;
                    ensure!(wire == frame, "frame on the bus differs from the snapshot");
                    ensure!(wire.relay[pot.index()] == relay, "frame reports a different relay state");
                    checks += 1;
                }
            }
        }
    }
    Ok(format!(
        "{checks} cases ({} soil values², 3 thresholds, 3 pots), {:.2}s",
        values.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn dry_config() -> SystemConfig {
    let mut cfg = SystemConfig::default();
    cfg.sim.initial_moisture = [0.05; 3];
    cfg.sim.rain_events_per_day = 0.0;
    cfg
}

fn failure_semantics() -> Outcome {
    // (a) a probe stuck at 4095: five stuck frames, then notice and shut-off
    let mut twin = Twin::new(&dry_config(), 21);
    twin.run(30, |_| {});
    ensure!(twin.firmware().relay.iter().all(|r| r.is_on()), "(a) dry pots should be irrigating");
    twin.inject(Fault {
        kind: FaultKind::SoilStuck { channel: 3, value: 4095 },
        from: 31,
        until: None,
    });
    let mut stuck_frames = 0;
    let mut notice_step = None;
    let mut step = 0;
    while notice_step.is_none() && step < 100 {
        step += 1;
        let r = twin.step();
        if r.frame.as_ref().is_some_and(|f| f.soil_adc[3] == 4095) {
            stuck_frames += 1;
        }
        if r.notifications.iter().any(|n| n.kind == NotificationKind::SensorFailure) {
            notice_step = Some(step);
            ensure!(stuck_frames == 5, "(a) failure declared after {stuck_frames} stuck frames");
        }
    }
    ensure!(notice_step.is_some(), "(a) no sensor_failure notification");
    twin.step();
    ensure!(
        twin.firmware().relay.iter().all(|r| !r.is_on()),
        "(a) relays still on one cycle after the failure notice"
    );
    twin.run(600, |_| {});
    ensure!(twin.firmware().relay.iter().all(|r| !r.is_on()), "(a) irrigation resumed while the probe is stuck");

    // (b) link loss in AUTO: the device keeps thresholding
    let mut twin = Twin::new(&dry_config(), 22);
    twin.run(10, |_| {});
    twin.set_connected(false);
    let thresholds = twin.firmware().threshold;
    let mut frames = 0;
    let mut mismatch = None;
    twin.run(3600, |r| {
        if let Some(f) = &r.frame {
            frames += 1;
            for pot in PotId::ALL {
                let on = f.zone_average(pot) > thresholds[pot.index()];
                if f.relay[pot.index()].is_on() != on || f.mode != Mode::Auto {
                    mismatch.get_or_insert(f.timestamp);
                }
            }
        }
    });
    ensure!(mismatch.is_none(), "(b) frame at t={} departs from AUTO thresholding", mismatch.unwrap());
    ensure!(twin.water().delivered_l.iter().all(|&l| l > 0.0), "(b) no irrigation while offline");
    ensure!(twin.controller().state().current_mode == Mode::Auto, "(b) mode changed on link loss");

    // (c) link loss in MANUAL: every valve closes
    let mut twin = Twin::new(&dry_config(), 23);
    twin.set_mode(Mode::Manual).map_err(|e| e.to_string())?;
    for pot in PotId::ALL {
        twin.manual_valve(pot, RelayState::On).map_err(|e| e.to_string())?;
    }
    twin.run(5, |_| {});
    ensure!(twin.firmware().relay.iter().all(|r| r.is_on()), "(c) manual valves did not open");
    twin.set_connected(false);
    twin.step();
    ensure!(twin.firmware().relay.iter().all(|r| !r.is_on()), "(c) valves open one cycle after link loss");
    twin.run(600, |_| {});
    ensure!(twin.firmware().relay.iter().all(|r| !r.is_on()), "(c) valves reopened while offline");
    ensure!(twin.controller().state().current_mode == Mode::Manual, "(c) mode changed on link loss");

    Ok(format!(
        "(a) notice after 5 stuck frames, all OFF next cycle; (b) {frames} offline AUTO frames all follow the rule; (c) all OFF next cycle"
    ))
}

fn random_snapshot(rng: &mut ChaCha8Rng) -> SensorSnapshot {
    let relay: [RelayState; 3] = std::array::from_fn(|_| RelayState::from_bool(rng.random()));
    let dht = rng.random_bool(0.9);
    let flow = if relay.iter().any(|r| r.is_on()) {
        match rng.random_range(0..4) {
            0 => 0.0,
            1 => 30.0,
            2 => f64::from(rng.random_range(0..=60u32)) * 0.5,
            _ => rng.random_range(0.0..=30.0),
        }
    } else {
        0.0
    };
    SensorSnapshot {
        timestamp: if rng.random_bool(0.05) { u64::MAX } else { rng.random() },
        temperature_c: dht.then(|| rng.random_range(0..=50)),
        humidity_pct: dht.then(|| rng.random_range(20..=90)),
        rain: if rng.random() { Rain::Wet } else { Rain::Dry },
        flow_lpm: flow,
        soil_adc: std::array::from_fn(|_| rng.random_range(0..=4095)),
        relay,
        mode: Mode::ALL[rng.random_range(0..3)],
    }
}

fn protocol_robustness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
    for i in 0..10_000 {
        let s = random_snapshot(&mut rng);
        let line = encode_telemetry(&s);
        let back = parse_telemetry(&line).map_err(|e| format!("snapshot {i}: {e} in {line:?}"))?;
        ensure!(back == s, "snapshot {i} changed across a round trip: {line:?}");
        ensure!(encode_telemetry(&back) == line, "snapshot {i} re-encodes differently");
    }
    let canonical = encode_telemetry(&random_snapshot(&mut rng)).into_bytes();
    let mut panics = 0;
    let mut accepted = 0;
    let quiet = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for i in 0..100_000 {
        // half pure noise, half mutated valid frames
        let bytes: Vec<u8> = if i % 2 == 0 {
            let mut b = vec![0u8; rng.random_range(0..160)];
            rng.fill_bytes(&mut b);
            b
        } else {
            let mut b = canonical.clone();
            for _ in 0..rng.random_range(1..4) {
                let k = rng.random_range(0..b.len());
                match rng.random_range(0..3) {
                    0 => b[k] = rng.random(),
                    1 => {
                        b.remove(k);
                    }
                    _ => b.insert(k, rng.random()),
                }
                if b.is_empty() {
                    break;
                }
            }
            b
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let frame_ok = parse_telemetry_bytes(&bytes).is_ok();
            let _ = parse_command(&String::from_utf8_lossy(&bytes));
            frame_ok
        }));
        match outcome {
            Ok(true) => accepted += 1,
            Ok(false) => {}
            Err(_) => panics += 1,
        }
    }
    std::panic::set_hook(quiet);
    ensure!(panics == 0, "{panics} parser panics in 100000 fuzz lines");
    Ok(format!(
        "10000 round trips exact; 100000 fuzz lines, 0 aborts ({accepted} still valid); {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn split_correctness() -> Outcome {
    for n in 1..=1000usize {
        let records: Vec<SensorSnapshot> = (0..n as u64)
            .map(|t| SensorSnapshot {
                timestamp: t,
                temperature_c: Some(20),
                humidity_pct: Some(50),
                rain: Rain::Dry,
                flow_lpm: 0.0,
                soil_adc: [0; 6],
                relay: [RelayState::Off; 3],
                mode: Mode::Auto,
            })
            .collect();
        let ds = to_dataset(&records, PotId::ALL[0]).map_err(|e| e.to_string())?;
        let (tr, va, te) = split(&ds);
        let want = ((7 * n) / 10, (15 * n) / 100);
        ensure!(
            (tr.len(), va.len(), te.len()) == (want.0, want.1, n - want.0 - want.1),
            "N={n}: sizes ({}, {}, {})",
            tr.len(),
            va.len(),
            te.len()
        );
        let joined: Vec<u64> = tr
            .timestamps
            .iter()
            .chain(&va.timestamps)
            .chain(&te.timestamps)
            .copied()
            .collect();
        ensure!(joined == (0..n as u64).collect::<Vec<_>>(), "N={n}: split is not contiguous and ordered");
    }
    Ok("N = 1..=1000 sizes and order exact".into())
}

fn conservation() -> Outcome {
    const TOL: f64 = 1e-9;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut cfg = SystemConfig::default();
        cfg.sim.e0 = 0.0;
        cfg.sim.d = 0.0;
        cfg.sim.rain_events_per_day = 0.0;
        cfg.sim.initial_moisture = [0.01, 0.08, 0.15];
        let mut twin = Twin::new(&cfg, seed);
        let start = twin.pots().map(|p| p.moisture);
        twin.run(6 * 3600, |_| {});
        let w = twin.water();
        for i in 0..3 {
            let from_flow = w.delivered_l[i] * cfg.sim.moisture_per_liter();
            let gain = w.unclamped_moisture[i] - start[i];
            worst = worst.max((from_flow - gain).abs());
        }
        ensure!(w.delivered_l.iter().all(|&l| l > 0.0), "seed {seed}: nothing irrigated");
    }
    ensure!(worst < TOL, "flow bookkeeping off by {worst:e}");

    // bounds under full dynamics, including a saturating manual flood
    let mut cfg = SystemConfig::default();
    cfg.sim.rain_events_per_day = 20.0;
    let m_sat = cfg.sim.m_sat;
    let mut twin = Twin::new(&cfg, 99);
    twin.set_mode(Mode::Manual).map_err(|e| e.to_string())?;
    for pot in PotId::ALL {
        twin.manual_valve(pot, RelayState::On).map_err(|e| e.to_string())?;
    }
    let mut steps = 0u64;
    let mut out_of_bounds = 0u64;
    for phase in 0..2 {
        if phase == 1 {
            for pot in PotId::ALL {
                twin.manual_valve(pot, RelayState::Off).map_err(|e| e.to_string())?;
            }
        }
        for _ in 0..86_400 {
            twin.step();
            steps += 1;
            if twin.pots().iter().any(|p| !(0.0..=m_sat).contains(&p.moisture)) {
                out_of_bounds += 1;
            }
        }
    }
    ensure!(out_of_bounds == 0, "{out_of_bounds} steps left [0, m_sat]");
    Ok(format!(
        "max |flow − gain| {worst:.1e} over 5 seeds; moisture in [0, {m_sat}] for {steps} steps"
    ))
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = SystemConfig::from_toml(GATE_CONFIG).map_err(|e| e.to_string())?;
    let (a, b) = (dir.join("det_a.jsonl"), dir.join("det_b.jsonl"));
    simulate(&cfg, 86_400, 5, &a).map_err(|e| format!("{e:#}"))?;
    simulate(&cfg, 86_400, 5, &b).map_err(|e| format!("{e:#}"))?;
    let (la, lb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    ensure!(!la.is_empty() && la == lb, "telemetry logs differ");

    let tcfg = train_config(&cfg, Some(3), Some(11));
    let (da, db) = (dir.join("det_model_a"), dir.join("det_model_b"));
    std::fs::create_dir_all(&da).unwrap();
    std::fs::create_dir_all(&db).unwrap();
    let (_, pa) = train(&a, PotId::ALL[1], &tcfg, &da).map_err(|e| format!("{e:#}"))?;
    let (_, pb) = train(&b, PotId::ALL[1], &tcfg, &db).map_err(|e| format!("{e:#}"))?;
    let (ha, hb) = (std::fs::read(history_path(&pa)).unwrap(), std::fs::read(history_path(&pb)).unwrap());
    ensure!(ha == hb, "training histories differ");
    ensure!(std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap(), "checkpoints differ");
    Ok(format!(
        "{} log bytes and {} history bytes identical across runs",
        la.len(),
        ha.len()
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient correctness", Box::new(gradient_check)),
        ("forecast quality gate", Box::new(|| forecast_gate(dir.path()))),
        ("AUTO logic oracle", Box::new(auto_oracle)),
        ("failure semantics", Box::new(failure_semantics)),
        ("protocol robustness", Box::new(protocol_robustness)),
        ("split correctness", Box::new(split_correctness)),
        ("simulation conservation", Box::new(conservation)),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = 0;
    let total = Instant::now();
    for (name, check) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(|| check())).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1?}",
        criteria.len() - failed,
        Duration::from_secs_f64(total.elapsed().as_secs_f64())
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
