//! Subcommands of the `drip` binary. Each one is a plain function so tests
//! can drive it without spawning a process.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use drip_core::domain::PotId;
use drip_core::protocol::encode_telemetry;
use drip_core::store::{to_dataset, TelemetryLog};
use drip_core::twin::{Summary, Twin};
use drip_core::SystemConfig;
use drip_forecast::predictor::{checkpoint_name, Fitted};
use drip_forecast::{EvalReport, ForecastModel, History, ModelSet, TrainConfig};
use drip_gateway::{router, ControlLoop};
use tracing::{info, warn};

#[derive(Debug, Parser)]
#[command(name = "drip", version, about = "Smart drip-irrigation digital twin")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the closed loop for a stretch of simulated time and write its log.
    Simulate(SimulateArgs),
    /// Train the forecaster for one pot from a telemetry log.
    Train(TrainArgs),
    /// Report a model's MAE on the test split of a log.
    Eval(EvalArgs),
    /// Run the simulation behind the HTTP gateway.
    Serve(ServeArgs),
    /// Print a log's frames, optionally paced in simulated time.
    Replay(ReplayArgs),
    /// Convert a log to CSV.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Simulated time: seconds, or a number with suffix s, m, h or d.
    #[arg(long, value_parser = parse_duration)]
    pub duration: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Pot number, 1 to 3.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub pot: u8,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint file, or a directory to receive `model_pot<k>.bin`.
    #[arg(long)]
    pub out: PathBuf,
    /// Configuration whose `[train]` section supplies the remaining settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding `model_pot<k>.bin` checkpoints.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Telemetry log written while serving (truncated at start).
    #[arg(long, default_value = "telemetry.jsonl")]
    pub log: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Simulated seconds per wall-clock second.
    #[arg(long)]
    pub time_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Simulated seconds per wall-clock second; 0 prints without pausing.
    #[arg(long, default_value_t = 0.0)]
    pub speed: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `90`, `90s`, `15m`, `6h`, `2d`.
pub fn parse_duration(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, unit) = match s.char_indices().find(|(_, c)| !c.is_ascii_digit()) {
        Some((i, _)) => s.split_at(i),
        None => (s, "s"),
    };
    let n: u64 = num.parse().map_err(|_| format!("bad duration {s:?}"))?;
    let scale = match unit {
        "s" => 1,
        "m" => 60,
        "h" => 3600,
        "d" => 86_400,
        _ => return Err(format!("unknown duration unit {unit:?}; use s, m, h or d")),
    };
    n.checked_mul(scale).ok_or_else(|| format!("duration {s:?} is too long"))
}

pub fn load_config(path: Option<&Path>) -> Result<SystemConfig> {
    match path {
        Some(p) => SystemConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SystemConfig::default()),
    }
}

/// Runs the closed loop and writes every frame to `out`.
pub fn simulate(cfg: &SystemConfig, duration: u64, seed: u64, out: &Path) -> Result<Summary> {
    let mut log = TelemetryLog::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut twin = Twin::new(cfg, seed);
    let mut failure = None;
    twin.run(duration, |report| {
        if failure.is_some() {
            return;
        }
        if let Some(frame) = &report.frame {
            if let Err(e) = log.append(frame.clone()) {
                failure = Some(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e).context("writing telemetry log");
    }
    log.sync()?;
    Ok(twin.summary())
}

pub fn format_summary(s: &Summary) -> String {
    let mut out = format!(
        "simulated {} s, {} frames, {} notifications\n",
        s.duration_s, s.frames, s.notifications
    );
    for pot in PotId::ALL {
        let i = pot.index();
        out += &format!(
            "{pot}: water {:.3} L, relay duty {:.2}%, final moisture {:.4}\n",
            s.water_l[i],
            100.0 * s.duty[i],
            s.final_moisture[i]
        );
    }
    out += &format!("total water {:.3} L\n", s.total_water_l);
    out
}

pub fn train_config(cfg: &SystemConfig, epochs: Option<usize>, seed: Option<u64>) -> TrainConfig {
    let mut t = TrainConfig::from(&cfg.train);
    if let Some(e) = epochs {
        t.epochs = e;
    }
    if let Some(s) = seed {
        t.seed = s;
    }
    t
}

/// Where a checkpoint for `pot` goes given `--out`.
pub fn checkpoint_path(out: &Path, pot: PotId) -> PathBuf {
    if out.is_dir() {
        out.join(checkpoint_name(pot))
    } else {
        out.to_path_buf()
    }
}

/// Trains one pot's model from a log and writes the checkpoint plus a
/// `.history.json` file next to it.
pub fn train(log: &Path, pot: PotId, cfg: &TrainConfig, out: &Path) -> Result<(Fitted, PathBuf)> {
    let records = TelemetryLog::read(log).with_context(|| format!("reading {}", log.display()))?;
    let needed = cfg.window.min_rows();
    if records.len() < needed {
        bail!("need ≥ {needed} rows, log has {}", records.len());
    }
    let ds = to_dataset(&records, pot)?;
    let fitted = ForecastModel::fit(&ds, cfg)?;
    let path = checkpoint_path(out, pot);
    fitted.model.save(&path).with_context(|| format!("writing {}", path.display()))?;
    std::fs::write(history_path(&path), history_json(&fitted.history))?;
    Ok((fitted, path))
}

pub fn history_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".history.json");
    PathBuf::from(p)
}

pub fn history_json(h: &History) -> String {
    serde_json::to_string_pretty(h).expect("history serializes") + "\n"
}

pub fn format_report(label: &str, r: &EvalReport) -> String {
    format!(
        "{label}: MAE {:.5} (normalized), {:.2} ADC counts over {} windows",
        r.mae, r.mae_counts, r.windows
    )
}

/// Evaluates a checkpoint on the test split of a log.
pub fn eval(model: &Path, log: &Path) -> Result<EvalReport> {
    let model = ForecastModel::load(model).with_context(|| format!("loading {}", model.display()))?;
    let records = TelemetryLog::read(log).with_context(|| format!("reading {}", log.display()))?;
    let ds = to_dataset(&records, model.pot)?;
    let report = model.evaluate_dataset(&ds).with_context(|| {
        format!(
            "test split of {} rows holds no {}-row window",
            records.len(),
            model.window.min_rows()
        )
    })?;
    Ok(report)
}

/// Writes the log to `out` in canonical form. Returns the number of frames
/// written; a closed pipe ends the replay early without an error.
pub fn replay(log: &Path, speed: f64, mut out: impl Write) -> Result<usize> {
    let records = TelemetryLog::read(log).with_context(|| format!("reading {}", log.display()))?;
    let mut prev: Option<u64> = None;
    for (i, r) in records.iter().enumerate() {
        if let (Some(p), true) = (prev, speed > 0.0) {
            std::thread::sleep(Duration::from_secs_f64((r.timestamp - p) as f64 / speed));
        }
        match out.write_all(encode_telemetry(r).as_bytes()) {
            Ok(()) => {}
            // reader went away, e.g. piped into `head`
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(i),
            Err(e) => return Err(e.into()),
        }
        prev = Some(r.timestamp);
    }
    match out.flush() {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(records.len()),
    }
}

pub fn export(log: &Path, out: &Path) -> Result<usize> {
    let records = TelemetryLog::read(log).with_context(|| format!("reading {}", log.display()))?;
    let file = std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    drip_core::store::export_csv(&records, std::io::BufWriter::new(file))?;
    Ok(records.len())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Serves until `shutdown` resolves. Returns the address actually bound.
pub async fn serve(
    args: &ServeArgs,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    bound: Option<tokio::sync::oneshot::Sender<SocketAddr>>,
) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(p) = args.port {
        cfg.gateway.port = p;
    }
    if let Some(s) = args.time_scale {
        if !(s > 0.0) {
            bail!("--time-scale must be positive");
        }
        cfg.gateway.time_scale = s;
    }
    let models = match &args.models {
        Some(dir) => ModelSet::load_dir(dir).with_context(|| format!("loading models from {}", dir.display()))?,
        None => ModelSet::default(),
    };
    if models.is_empty() {
        warn!("no forecast models loaded; AI mode will drive pots by threshold");
    }
    let mut twin = Twin::new(&cfg, args.seed);
    if !models.is_empty() {
        twin = twin.with_forecaster(Box::new(models));
    }
    let log = TelemetryLog::create(&args.log).with_context(|| format!("creating {}", args.log.display()))?;
    let (ctl, shared) = ControlLoop::new(twin, log, cfg.gateway.token.clone(), cfg.gateway.event_buffer);

    let addr = format!("{}:{}", cfg.gateway.bind, cfg.gateway.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    let local = listener.local_addr()?;
    info!(%local, "gateway listening");
    if let Some(tx) = bound {
        let _ = tx.send(local);
    }

    let (stop_tx, stop_rx) = tokio::sync::watch::channel(false);
    let tick = Duration::from_secs_f64(cfg.sim.dt as f64 / cfg.gateway.time_scale);
    let mut loop_stop = stop_rx.clone();
    let control = tokio::spawn(ctl.run(tick, async move {
        let _ = loop_stop.wait_for(|s| *s).await;
    }));
    let mut http_stop = stop_rx;
    let server = axum::serve(listener, router(shared.clone())).with_graceful_shutdown(async move {
        let _ = http_stop.wait_for(|s| *s).await;
    });
    let server = tokio::spawn(async move { server.await });

    shutdown.await;
    info!("shutting down");
    shared.close();
    let _ = stop_tx.send(true);
    control.await.context("control loop panicked")??;
    server.await.context("server panicked")??;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let cfg = load_config(a.config.as_deref())?;
            let summary = simulate(&cfg, a.duration, a.seed, &a.out)?;
            print!("{}", format_summary(&summary));
        }
        Command::Train(a) => {
            let cfg = load_config(a.config.as_deref())?;
            let tcfg = train_config(&cfg, a.epochs, a.seed);
            let pot = PotId::new(usize::from(a.pot) - 1)?;
            let (fitted, path) = train(&a.log, pot, &tcfg, &a.out)?;
            for e in &fitted.history.epochs {
                match e.val_loss {
                    Some(v) => println!("epoch {:>3}: train {:.6}  val {:.6}", e.epoch + 1, e.train_loss, v),
                    None => println!("epoch {:>3}: train {:.6}", e.epoch + 1, e.train_loss),
                }
            }
            if let Some(b) = fitted.history.best_epoch {
                println!("kept epoch {}", b + 1);
            }
            match &fitted.test {
                Some(r) => println!("{}", format_report("test", r)),
                None => println!("test split too short to evaluate"),
            }
            println!("wrote {}", path.display());
        }
        Command::Eval(a) => {
            let r = eval(&a.model, &a.log)?;
            println!("{}", format_report("test", &r));
        }
        Command::Serve(a) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(&a, shutdown_signal(), None))?;
        }
        Command::Replay(a) => {
            let stdout = std::io::stdout();
            replay(&a.log, a.speed, stdout.lock())?;
        }
        Command::Export(a) => {
            let n = export(&a.log, &a.out)?;
            println!("wrote {n} rows to {}", a.out.display());
        }
    }
    Ok(())
}
