use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tiertest::agents::repository::SuiteStore;
use tiertest::agents::{assemble, test_request, Deployment, DeploymentConfig};
use tiertest::bus::{Inbox, TcpConfig, TcpHost};
use tiertest::domain::{AgentId, Fields, TestingType, Value};
use tiertest::protocol::{canonical_text, FinalReport, MessageBody};
use tiertest::scenario::{render_report, run_scenario};
use tiertest::sut::SutModel;

#[derive(Parser)]
#[command(
    name = "tiertest",
    version,
    about = "Multi-agent testing of simulated three-tier systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Sim,
    Tcp,
}

#[derive(Args)]
struct Common {
    /// System model (JSON)
    #[arg(long, env = "TIERTEST_MODEL")]
    model: Option<PathBuf>,
    /// Output directory for reports, traces and simulation state
    #[arg(long, env = "TIERTEST_OUT", default_value = "out")]
    out: PathBuf,
    #[arg(long, env = "TIERTEST_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "TIERTEST_MODE", value_enum, default_value = "sim")]
    mode: Mode,
    /// Controller address in tcp mode
    #[arg(long, env = "TIERTEST_ADDR")]
    addr: Option<SocketAddr>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script on the simulated bus
    Run {
        #[arg(long, env = "TIERTEST_SCENARIO")]
        scenario: PathBuf,
        /// Overrides the scenario's seed
        #[arg(long, env = "TIERTEST_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "TIERTEST_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Ask the controller for a regression run
    Regress {
        #[command(flatten)]
        common: Common,
        /// Client to mark busy for the run (sim mode)
        #[arg(long)]
        busy: Vec<String>,
    },
    /// Ask the controller for a stress run
    Stress {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        volume: u64,
        #[arg(long, default_value_t = 1)]
        intervals: u64,
    },
    /// Switch an injected fault on or off for later sim runs
    Fault {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        id: String,
        #[arg(long, conflicts_with = "off")]
        on: bool,
        #[arg(long)]
        off: bool,
    },
    /// Show the latest report
    Report {
        #[arg(long, env = "TIERTEST_OUT", default_value = "out")]
        out: PathBuf,
        /// Print the structured report instead of text
        #[arg(long)]
        json: bool,
    },
    /// Host every agent of a model over TCP
    Serve {
        #[arg(long, env = "TIERTEST_MODEL")]
        model: PathBuf,
        #[arg(long, env = "TIERTEST_ADDR", default_value = "127.0.0.1:7878")]
        addr: SocketAddr,
        /// Stop after this many milliseconds; runs until killed otherwise
        #[arg(long)]
        duration_ms: Option<u64>,
    },
}

/// What sim-mode commands remember between invocations.
#[derive(Debug, Default, Serialize, Deserialize)]
struct SimState {
    #[serde(default)]
    faults: BTreeMap<String, bool>,
    #[serde(default)]
    runs: u64,
    #[serde(default)]
    last_run: Option<String>,
    #[serde(default)]
    repository: Option<serde_json::Value>,
}

impl SimState {
    fn path(out: &Path) -> PathBuf {
        out.join("state.json")
    }

    fn load(out: &Path) -> Result<Self> {
        let path = Self::path(out);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn save(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        let mut text = canonical_text(self);
        text.push('\n');
        std::fs::write(Self::path(out), text)?;
        Ok(())
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { scenario, seed, out } => cmd_run(&scenario, seed, &out),
        Command::Regress { common, busy } => cmd_request(&common, TestingType::Regression, Fields::new(), &busy),
        Command::Stress {
            common,
            volume,
            intervals,
        } => {
            if volume == 0 || intervals == 0 {
                bail!("volume and intervals must be positive");
            }
            let params: Fields = [
                ("volume".to_owned(), Value::Int(volume as i64)),
                ("intervals".to_owned(), Value::Int(intervals as i64)),
            ]
            .into();
            cmd_request(&common, TestingType::Stress, params, &[])
        }
        Command::Fault { common, id, on, off } => {
            if !on && !off {
                bail!("pass --on or --off");
            }
            cmd_fault(&common, &id, on)
        }
        Command::Report { out, json } => cmd_report(&out, json),
        Command::Serve {
            model,
            addr,
            duration_ms,
        } => cmd_serve(&model, addr, duration_ms),
    }
}

fn load_model(path: Option<&Path>) -> Result<SutModel> {
    let path = path.ok_or_else(|| anyhow!("--model is required"))?;
    SutModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_run(scenario: &Path, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let outcome = match run_scenario(scenario, seed, Some(out)) {
        Ok(outcome) => outcome,
        Err(e) if e.is_input_error() => {
            eprintln!("error: {:#}", anyhow::Error::from(e));
            return Ok(ExitCode::from(2));
        }
        Err(e) => return Err(e.into()),
    };
    for report in &outcome.reports {
        print!("{}", render_report(report));
    }
    for a in &outcome.assertions {
        let verdict = if a.passed() { "pass" } else { "FAIL" };
        println!("assert step {} (tick {}): {verdict}", a.step, a.tick);
        for f in &a.failures {
            println!("  {f}");
        }
    }
    let state = SimState {
        runs: outcome.reports.len() as u64,
        last_run: outcome.reports.last().map(|r| r.run_id.clone()),
        ..SimState::default()
    };
    state.save(out)?;
    Ok(if outcome.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn write_report(out: &Path, report: &FinalReport) -> Result<()> {
    let dir = out.join(&report.run_id);
    std::fs::create_dir_all(&dir)?;
    let mut json = canonical_text(report);
    json.push('\n');
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("report.txt"), render_report(report))?;
    Ok(())
}

fn cmd_request(common: &Common, ty: TestingType, params: Fields, busy: &[String]) -> Result<ExitCode> {
    let report = match common.mode {
        Mode::Sim => sim_request(common, ty, params, busy)?,
        Mode::Tcp => {
            if !busy.is_empty() {
                bail!("--busy only applies in sim mode");
            }
            let addr = common.addr.ok_or_else(|| anyhow!("--addr is required in tcp mode"))?;
            tcp_request(addr, ty, params)?
        }
    };
    match report {
        Ok(report) => {
            write_report(&common.out, &report)?;
            print!("{}", render_report(&report));
            Ok(ExitCode::SUCCESS)
        }
        Err(reason) => {
            eprintln!("request rejected: {reason}");
            Ok(ExitCode::from(1))
        }
    }
}

type Answer = std::result::Result<FinalReport, String>;

fn sim_request(common: &Common, ty: TestingType, params: Fields, busy: &[String]) -> Result<Answer> {
    let model = load_model(common.model.as_deref())?;
    let mut state = SimState::load(&common.out)?;
    let mut cfg = DeploymentConfig::default();
    cfg.sim.seed = common.seed;
    cfg.controller.run_offset = state.runs;
    let mut d = Deployment::start(model, cfg, BTreeMap::new())?;
    for (id, on) in &state.faults {
        d.sut.set_fault(id, *on)?;
    }
    if let Some(repo) = &state.repository {
        let store = SuiteStore::load(&serde_json::to_vec(repo)?).context("restoring repository state")?;
        *d.store.lock().expect("store lock") = store;
    }
    for client in busy {
        let control = d
            .controls
            .get(client)
            .ok_or_else(|| anyhow!("unknown client `{client}`"))?;
        control.lock().expect("control lock").busy_until = u64::MAX;
    }
    let request = d.request(ty, params);
    if !d.bus.run_until_idle() {
        bail!("simulation hit its tick limit");
    }
    let answer = d
        .tester_inbox()
        .iter()
        .find(|e| e.header.correlation_id == Some(request))
        .map(|e| match &e.body {
            MessageBody::AggregateReport { report } => Ok(report.clone()),
            MessageBody::Rejected { reason } => Err(reason.clone()),
            other => Err(format!("unexpected {} reply", other.kind())),
        })
        .ok_or_else(|| anyhow!("no reply from the controller"))?;
    state.runs += 1;
    if let Ok(report) = &answer {
        state.last_run = Some(report.run_id.clone());
    }
    state.repository = Some(serde_json::from_slice(&d.store.lock().expect("store lock").snapshot())?);
    state.save(&common.out)?;
    Ok(answer)
}

fn tcp_request(addr: SocketAddr, ty: TestingType, params: Fields) -> Result<Answer> {
    let cfg = TcpConfig::new("127.0.0.1:0".parse()?)
        .peer(AgentId::MCA, addr)
        .id_base(1 << 40);
    let host = TcpHost::start(cfg)?;
    let (inbox, received) = Inbox::new(AgentId::TESTER);
    host.register(Box::new(inbox))?;
    let request = host.inject(
        AgentId::TESTER,
        AgentId::MCA,
        MessageBody::TestRequest(test_request(ty, params)),
    )?;
    let until = Instant::now() + Duration::from_secs(30);
    while Instant::now() < until {
        for env in received.take() {
            if env.header.correlation_id != Some(request) {
                continue;
            }
            return Ok(match env.body {
                MessageBody::AggregateReport { report } => Ok(report),
                MessageBody::Rejected { reason } => Err(reason),
                other => Err(format!("unexpected {} reply", other.kind())),
            });
        }
        if let Some(e) = host.errors().first() {
            bail!("transport: {e}");
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    bail!("no reply from {addr} within 30 s")
}

fn cmd_fault(common: &Common, id: &str, on: bool) -> Result<ExitCode> {
    if common.mode == Mode::Tcp {
        bail!("faults can only be toggled in sim mode");
    }
    let model = load_model(common.model.as_deref())?;
    if model.fault(id).is_none() {
        bail!("unknown fault `{id}`");
    }
    let mut state = SimState::load(&common.out)?;
    state.faults.insert(id.to_owned(), on);
    state.save(&common.out)?;
    println!("fault {id} {}", if on { "on" } else { "off" });
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(out: &Path, json: bool) -> Result<ExitCode> {
    let state = SimState::load(out)?;
    let Some(run) = state.last_run else {
        println!("no reports");
        return Ok(ExitCode::SUCCESS);
    };
    let path = out.join(&run).join("report.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: FinalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if json {
        println!("{}", canonical_text(&report));
    } else {
        print!("{}", render_report(&report));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(model: &Path, addr: SocketAddr, duration_ms: Option<u64>) -> Result<ExitCode> {
    let model = load_model(Some(model))?;
    let (_handles, agents) = assemble(model, &DeploymentConfig::default(), BTreeMap::new())?;
    let host = TcpHost::start(TcpConfig::new(addr))?;
    for agent in agents {
        host.register(agent)?;
    }
    println!("serving on {}", host.local_addr());
    match duration_ms {
        Some(ms) => std::thread::sleep(Duration::from_millis(ms)),
        None => loop {
            std::thread::sleep(Duration::from_secs(3600));
        },
    }
    for e in host.errors() {
        eprintln!("{e}");
    }
    host.shutdown();
    Ok(ExitCode::SUCCESS)
}
