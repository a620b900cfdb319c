use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use deltapad::config::{AppConfig, DeviceBackend};
use deltapad::device::{open_link, DeviceHandle, Pacing, StreamEvent};
use deltapad::service::{system_clock, CreateSession, ResponseRequest};
use deltapad::store::load_dir;
use deltapad::{build_service, Server};
use deltapad_core::experiment::{analyze, summarize, AnalysisReport, Session};
use deltapad_core::patterns::{ContactPatternId, Mode, PatternId, Stimulus};
use deltapad_core::render::Renderer;
use deltapad_core::responder::SyntheticResponder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokio::sync::broadcast;

#[derive(Parser)]
#[command(name = "deltapad", version, about = "Finger-pad Delta display: rendering, sessions and analysis")]
struct Cli {
    /// Service config JSON. DELTAPAD_PORT and DELTAPAD_DATA_DIR override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reachability and force capability over the contact workspace.
    WorkspaceReport,
    /// Render one pattern trial to CSV.
    Render {
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        pattern: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Normal force in N; the configured default when absent.
        #[arg(long)]
        force: Option<f64>,
    },
    /// Run a whole session against a synthetic responder.
    Run(RunArgs),
    /// Omnibus and pairwise tests over stored sessions.
    Analyze {
        /// Directories holding session JSON files.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// HTTP and WebSocket API for the experiment console.
    Serve {
        #[command(flatten)]
        svc: ServiceArgs,
        /// Play trajectories without waiting for the tick (simulator only).
        #[arg(long)]
        fast: bool,
    },
    /// Play a centre touch and stream device state as JSON lines.
    DeviceTest {
        #[arg(long)]
        device: Option<DeviceBackend>,
    },
}

#[derive(Args)]
struct ServiceArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    device: Option<DeviceBackend>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    mode: Mode,
    #[arg(long, default_value = "S1")]
    subject: String,
    /// `default`, `perfect` or a responder JSON file.
    #[arg(long, default_value = "default")]
    responder: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<u32>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    device: Option<DeviceBackend>,
    /// Pace playback at the control tick even on the simulator.
    #[arg(long)]
    realtime: bool,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<AppConfig> {
    let mut cfg = match path {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    Ok(cfg)
}

fn write_out(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            let mut file = std::io::BufWriter::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?);
            f(&mut file)?;
            file.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> anyhow::Result<()> {
    write_out(out, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

fn responder_for(spec: &str, mode: Mode) -> anyhow::Result<SyntheticResponder> {
    let r = match spec {
        "default" => SyntheticResponder::default_for(mode),
        "perfect" => SyntheticResponder::perfect(mode),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading responder {path}"))?;
            SyntheticResponder::from_json(&text).map_err(|e| anyhow::anyhow!("responder {path}: {e}"))?
        }
    };
    if r.mode != mode {
        bail!("responder is for {} sessions, not {mode}", r.mode);
    }
    Ok(r)
}

async fn run_session(cfg: AppConfig, args: RunArgs) -> anyhow::Result<()> {
    let responder = responder_for(&args.responder, args.mode)?;
    let model = cfg.model()?;
    let svc = build_service(&cfg, model, system_clock())?;
    let result = async {
        let seed = args.seed.unwrap_or_else(rand::random);
        let session = svc.create_session(CreateSession {
            mode: args.mode,
            subject_id: args.subject.clone(),
            rng_seed: Some(seed),
            repetitions: args.repetitions,
            training: false,
            force_scale: None,
            pattern_set: None,
        })?;
        tracing::info!(id = %session.id, trials = session.trials.len(), seed, "session created");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let subject = responder.subject(&mut rng);
        loop {
            let done = svc.session(&session.id)?.is_complete();
            if done {
                break;
            }
            let p = svc.present(&session.id).await?;
            let truth = svc.session(&session.id)?.trials[p.trial].true_pattern;
            let r = subject.respond(truth, &mut rng)?;
            svc.respond(
                &session.id,
                ResponseRequest { trial: p.trial, answer: r.answer.label().into(), confidence: r.confidence.into() },
            )?;
        }
        let report = svc.report(&session.id)?;
        write_json(None, &report)
    }
    .await;
    let s = svc.clone();
    tokio::task::spawn_blocking(move || s.shutdown()).await?;
    result
}

fn analyze_dirs(dirs: &[PathBuf], alpha: f64) -> anyhow::Result<BTreeMap<&'static str, AnalysisReport>> {
    let mut sessions: Vec<Session> = Vec::new();
    for dir in dirs {
        // a service data dir keeps its sessions one level down
        let nested = dir.join("sessions");
        let dir = if nested.is_dir() { nested } else { dir.clone() };
        sessions.extend(load_dir(&dir)?);
    }
    if sessions.is_empty() {
        bail!("no sessions found in {}", dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>().join(", "));
    }
    let mut out = BTreeMap::new();
    for mode in [Mode::Contact, Mode::Stretch] {
        let of_mode: Vec<Session> = sessions.iter().filter(|s| s.mode() == mode).cloned().collect();
        if of_mode.is_empty() {
            continue;
        }
        out.insert(mode.as_str(), analyze(summarize(&of_mode)?, alpha)?);
    }
    Ok(out)
}

async fn device_test(cfg: AppConfig) -> anyhow::Result<()> {
    let model = cfg.model()?;
    let traj = Renderer::new(&model).render(&Stimulus::contact_pattern(
        ContactPatternId::C,
        &model.layout,
        model.render.default_force,
    ))?;
    let link = open_link(&cfg.device, &model)?;
    let (events, mut rx) = broadcast::channel(1024);
    let device = DeviceHandle::spawn(link, model, Pacing::RealTime, events);
    let printer = tokio::spawn(async move {
        while let Ok(ev) = rx.recv().await {
            if let StreamEvent::Snapshot(s) = ev {
                if s.phase.is_some() {
                    println!("{}", serde_json::to_string(&s).unwrap());
                }
            }
        }
    });
    let report = device.play(traj).await;
    let d = device.clone();
    tokio::task::spawn_blocking(move || d.shutdown()).await?;
    printer.abort();
    let report = report?;
    eprintln!(
        "played {} waypoints, {} frames, {} retries, {:.2} s",
        report.waypoints, report.frames_sent, report.retries, report.duration_s
    );
    Ok(())
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::WorkspaceReport => {
            let report = cfg.model()?.feasibility()?;
            write_json(None, &report)
        }
        Command::Render { mode, pattern, out, force } => {
            let model = cfg.model()?;
            let id: PatternId = mode.parse_pattern(&pattern)?;
            let stimulus = id.stimulus(&model.layout, force.unwrap_or(model.render.default_force))?;
            let traj = Renderer::new(&model).render(&stimulus)?;
            write_out(out.as_deref(), |w| traj.write_csv(w))
        }
        Command::Run(args) => {
            if let Some(d) = &args.data_dir {
                cfg.data_dir = d.clone();
            }
            if let Some(d) = &args.device {
                cfg.device = d.clone();
            }
            cfg.realtime = args.realtime || matches!(cfg.device, DeviceBackend::Serial(_));
            cfg.validate()?;
            run_session(cfg, args).await
        }
        Command::Analyze { dirs, alpha, out } => {
            if !(alpha > 0.0 && alpha < 1.0) {
                bail!("alpha {alpha} outside (0, 1)");
            }
            write_json(out.as_deref(), &analyze_dirs(&dirs, alpha)?)
        }
        Command::Serve { svc, fast } => {
            if let Some(p) = svc.port {
                cfg.port = p;
            }
            if let Some(d) = svc.data_dir {
                cfg.data_dir = d;
            }
            if let Some(d) = svc.device {
                cfg.device = d;
            }
            if fast {
                cfg.realtime = false;
            }
            let server = Server::start(&cfg).await?;
            eprintln!("listening on http://{}", server.addr);
            server.run_until_ctrl_c().await
        }
        Command::DeviceTest { device } => {
            if let Some(d) = device {
                cfg.device = d;
            }
            cfg.validate()?;
            device_test(cfg).await
        }
    }
}

fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return std::process::ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
