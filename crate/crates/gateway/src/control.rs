//! The control loop task. It alone owns the twin and the telemetry log;
//! handlers talk to it through an ordered input queue and read the state it
//! publishes after every cycle.

use std::future::Future;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use drip_core::controller::{Health, IrrigationPlan, Rejection, SensorHealth};
use drip_core::domain::{Mode, Notification, RelayState, SensorSnapshot, POT_COUNT};
use drip_core::protocol::encode_telemetry;
use drip_core::store::{StoreError, TelemetryLog};
use drip_core::twin::Twin;
use serde::Serialize;
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tracing::{info, warn};

use crate::pins::PinWrite;

/// One message on the event stream, numbered in controller order.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEvent {
    pub seq: u64,
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    Telemetry(SensorSnapshot),
    Notification(Notification),
}

impl StreamEvent {
    pub fn name(&self) -> &'static str {
        match self.body {
            EventBody::Telemetry(_) => "telemetry",
            EventBody::Notification(_) => "notification",
        }
    }

    /// JSON payload; telemetry uses the wire frame verbatim.
    pub fn data(&self) -> String {
        match &self.body {
            EventBody::Telemetry(s) => encode_telemetry(s).trim_end().to_string(),
            EventBody::Notification(n) => serde_json::to_string(n).expect("notification serializes"),
        }
    }
}

/// Everything `GET /state` reports, taken from one completed cycle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateView {
    pub cycle: u64,
    /// Simulation time, seconds.
    pub time: u64,
    pub mode: Mode,
    pub mode_code: u8,
    /// Mode reported by the device in the latest frame.
    pub device_mode: Option<Mode>,
    pub relays: [RelayState; POT_COUNT],
    pub thresholds: [u16; POT_COUNT],
    pub latest: Option<serde_json::Value>,
    pub sensor_health: SensorHealth,
    pub connected: bool,
    pub halted: bool,
    pub plan: IrrigationPlan,
    /// Latest AI forecast per pot in ADC counts.
    pub forecast: [Option<Vec<f64>>; POT_COUNT],
}

impl StateView {
    fn capture(twin: &Twin, cycle: u64) -> StateView {
        let c = twin.controller();
        let s = c.state();
        let latest = c.latest();
        StateView {
            cycle,
            time: twin.now(),
            mode: s.current_mode,
            mode_code: s.current_mode.code(),
            device_mode: latest.map(|f| f.mode),
            relays: c.reported_relays(),
            thresholds: s.threshold,
            latest: latest.map(|f| serde_json::from_str(&encode_telemetry(f)).expect("frame is JSON")),
            sensor_health: s.sensor_health,
            connected: s.connected,
            halted: c.halted(),
            plan: s.plan,
            forecast: c.last_forecasts().clone(),
        }
    }

    pub fn any_sensor_failed(&self) -> bool {
        self.sensor_health.dht == Health::Failed || self.sensor_health.soil.contains(&Health::Failed)
    }
}

/// Requests the control loop serves, each answered with the cycle number
/// after which it takes effect.
#[derive(Debug)]
pub enum Input {
    Pin {
        write: PinWrite,
        reply: oneshot::Sender<Result<u64, Rejection>>,
    },
    Link {
        connected: bool,
        reply: oneshot::Sender<u64>,
    },
}

/// State shared between the control loop and HTTP handlers.
#[derive(Debug)]
pub struct Shared {
    pub token: String,
    state: RwLock<Arc<StateView>>,
    events: broadcast::Sender<Arc<StreamEvent>>,
    log: Mutex<TelemetryLog>,
    inputs: mpsc::Sender<Input>,
    closing: watch::Sender<bool>,
}

#[derive(Debug, thiserror::Error)]
#[error("control loop has stopped")]
pub struct LoopGone;

impl Shared {
    pub fn state(&self) -> Arc<StateView> {
        self.state.read().expect("state lock").clone()
    }

    /// Asks open event streams to finish, so a graceful shutdown can
    /// complete.
    pub fn close(&self) {
        self.closing.send_replace(true);
    }

    /// Resolves once [`Shared::close`] has been called.
    pub fn closed(&self) -> impl std::future::Future<Output = ()> + Send + 'static {
        let mut rx = self.closing.subscribe();
        async move {
            let _ = rx.wait_for(|c| *c).await;
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<StreamEvent>> {
        self.events.subscribe()
    }

    /// Canonical frames with `from ≤ ts ≤ to`.
    pub fn telemetry_range(&self, from: Option<u64>, to: Option<u64>) -> String {
        let log = self.log.lock().expect("log lock");
        log.range(from, to).iter().map(encode_telemetry).collect()
    }

    pub async fn pin_write(&self, write: PinWrite) -> Result<Result<u64, Rejection>, LoopGone> {
        let (reply, rx) = oneshot::channel();
        self.inputs
            .send(Input::Pin { write, reply })
            .await
            .map_err(|_| LoopGone)?;
        rx.await.map_err(|_| LoopGone)
    }

    pub async fn set_link(&self, connected: bool) -> Result<u64, LoopGone> {
        let (reply, rx) = oneshot::channel();
        self.inputs
            .send(Input::Link { connected, reply })
            .await
            .map_err(|_| LoopGone)?;
        rx.await.map_err(|_| LoopGone)
    }
}

pub struct ControlLoop {
    twin: Twin,
    shared: Arc<Shared>,
    rx: mpsc::Receiver<Input>,
    cycle: u64,
    seq: u64,
}

impl ControlLoop {
    pub fn new(twin: Twin, log: TelemetryLog, token: String, event_buffer: usize) -> (ControlLoop, Arc<Shared>) {
        let (tx, rx) = mpsc::channel(1024);
        let (events, _) = broadcast::channel(event_buffer.max(1));
        let shared = Arc::new(Shared {
            token,
            state: RwLock::new(Arc::new(StateView::capture(&twin, 0))),
            events,
            log: Mutex::new(log),
            inputs: tx,
            closing: watch::channel(false).0,
        });
        let ctl = ControlLoop {
            twin,
            shared: shared.clone(),
            rx,
            cycle: 0,
            seq: 0,
        };
        (ctl, shared)
    }

    pub fn twin(&self) -> &Twin {
        &self.twin
    }

    fn handle(&mut self, input: Input) {
        // effective at the end of the cycle about to run
        let cycle = self.cycle + 1;
        match input {
            Input::Pin { write, reply } => {
                let result = match write {
                    PinWrite::Mode(m) => self.twin.set_mode(m),
                    PinWrite::Valve { pot, state } => self.twin.manual_valve(pot, state),
                    PinWrite::Threshold { pot, counts } => self.twin.set_threshold(pot, counts),
                };
                let _ = reply.send(result.map(|_| cycle));
            }
            Input::Link { connected, reply } => {
                self.twin.set_connected(connected);
                let _ = reply.send(cycle);
            }
        }
    }

    fn publish(&mut self, body: EventBody) {
        self.seq += 1;
        // no subscribers is fine
        let _ = self.shared.events.send(Arc::new(StreamEvent { seq: self.seq, body }));
    }

    /// Applies queued inputs, runs one simulation step, stores and publishes
    /// its results.
    pub fn step(&mut self) -> Result<(), StoreError> {
        while let Ok(input) = self.rx.try_recv() {
            self.handle(input);
        }
        let report = self.twin.step();
        self.cycle += 1;
        if let Some(frame) = &report.frame {
            self.shared.log.lock().expect("log lock").append(frame.clone())?;
        }
        // notifications first: a failure notice precedes the frame showing its effect
        for n in report.notifications {
            self.publish(EventBody::Notification(n));
        }
        if let Some(frame) = report.frame {
            self.publish(EventBody::Telemetry(frame));
        }
        *self.shared.state.write().expect("state lock") =
            Arc::new(StateView::capture(&self.twin, self.cycle));
        Ok(())
    }

    /// Steps every `tick` of wall time until `shutdown` resolves, then syncs
    /// the log.
    pub async fn run(mut self, tick: Duration, shutdown: impl Future<Output = ()>) -> Result<(), StoreError> {
        let mut interval = tokio::time::interval(tick);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        tokio::pin!(shutdown);
        loop {
            tokio::select! {
                _ = &mut shutdown => break,
                _ = interval.tick() => {
                    if let Err(e) = self.step() {
                        warn!(error = %e, "telemetry log write failed; stopping");
                        return Err(e);
                    }
                }
            }
        }
        self.shared.log.lock().expect("log lock").sync()?;
        info!(cycles = self.cycle, "control loop stopped");
        Ok(())
    }
}
