//! Scripted scenarios over a simulated deployment: the tester's steps, the
//! expectations checked along the way, and the files a run leaves behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::client::LogSource;
use crate::agents::{DeployError, Deployment, DeploymentConfig};
use crate::bus::TraceRecord;
use crate::domain::{AgentId, DedupKey, Fields, Keyed, TestingType, Tick, Tier, Value, Verdict};
use crate::protocol::{canonical_text, Envelope, FinalReport, IngestOutcome, MessageBody};
use crate::sut::{run_user_session, LogEntry, LogOutcome, ModelError, SutModel, UserSessionScript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Relative paths resolve against the scenario file's directory.
    pub model: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub config: DeploymentConfig,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub tick: Tick,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    StartAgents,
    RunUnit,
    RunIntegration,
    RequestRegression,
    RunStress {
        volume: u64,
        intervals: u64,
    },
    SetFault {
        id: String,
        on: bool,
    },
    RunUserSession {
        client: String,
        script: UserSessionScript,
        #[serde(default = "yes")]
        faults_active: bool,
    },
    /// The client reports busy until `until`.
    SetBusy {
        client: String,
        until: Tick,
    },
    /// A stalled client agent swallows test requests.
    Stall {
        client: String,
        on: bool,
    },
    /// Swaps in an updated model; the repository drops stale cases on its
    /// next sweep.
    UpdateModel {
        model: PathBuf,
    },
    /// Asks the repository for a sweep and a summary.
    Maintain,
    Snapshot,
    AssertReport(Box<Expectation>),
}

fn yes() -> bool {
    true
}

/// Checks made at an `assert_report` step. Unset fields are not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expectation {
    /// Run id of the report to check; the latest report when unset.
    pub report: Option<String>,
    /// Exact defect keys of the report, in order.
    pub defects: Option<Vec<DedupKey>>,
    pub defect_count: Option<usize>,
    /// Keys every defect's context must carry.
    pub context_keys: Option<Vec<String>>,
    pub dispatched_muas: Option<usize>,
    pub partial: Option<bool>,
    pub missing_agents: Option<Vec<AgentId>>,
    pub attribution: Option<Vec<ExpectedAttribution>>,
    pub failure_intensity: Option<f64>,
    pub defects_per_interval: Option<Vec<u64>>,
    /// Every result in the report has this verdict.
    pub all_verdicts: Option<Verdict>,
    /// Reports the tester has received so far.
    pub reports: Option<usize>,
    /// Cases currently stored in the repository.
    pub stored_cases: Option<u64>,
    /// Error entries per client log.
    pub log_errors: Option<BTreeMap<String, usize>>,
    /// Events that must appear in this order in the timeline.
    pub flow: Option<Vec<FlowStep>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedAttribution {
    pub defect_type: String,
    pub operation_name: String,
    pub tier: Option<Tier>,
}

/// One expected timeline event. `kind` is a message body kind or
/// `log_error`; `from`/`to` match an agent id or a role (`CCA`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowStep {
    pub kind: String,
    pub from: Option<String>,
    pub to: Option<String>,
    pub defect_type: Option<String>,
    pub operation_name: Option<String>,
    pub ingest: Option<IngestOutcome>,
    /// Exact number of matching events in the whole timeline.
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssertionResult {
    pub step: usize,
    pub tick: Tick,
    pub failures: Vec<String>,
}

impl AssertionResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario {path}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid model {path}")]
    Model { path: PathBuf, source: ModelError },
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error("step {step}: {message}")]
    Step { step: usize, message: String },
    #[error("cannot access {path}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ScenarioError {
    /// Bad input files, as opposed to a scenario that ran and misbehaved.
    pub fn is_input_error(&self) -> bool {
        matches!(self, ScenarioError::Parse { .. } | ScenarioError::Model { .. })
    }
}

pub struct ScenarioOutcome {
    pub reports: Vec<FinalReport>,
    pub assertions: Vec<AssertionResult>,
    pub trace: Vec<TraceRecord>,
    pub logs: BTreeMap<String, Vec<u8>>,
}

impl ScenarioOutcome {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(AssertionResult::passed)
    }
}

impl ScenarioScript {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut script: ScenarioScript = serde_json::from_str(&text).map_err(|source| ScenarioError::Parse {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        script.model = base.join(&script.model);
        for step in &mut script.steps {
            if let Action::UpdateModel { model } = &mut step.action {
                *model = base.join(&*model);
            }
        }
        Ok(script)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        for (i, pair) in self.steps.windows(2).enumerate() {
            if pair[1].tick < pair[0].tick {
                return Err(ScenarioError::Step {
                    step: i + 1,
                    message: format!("tick {} comes before {}", pair[1].tick, pair[0].tick),
                });
            }
        }
        Ok(())
    }
}

fn load_model(path: &Path) -> Result<SutModel, ScenarioError> {
    SutModel::load(path).map_err(|source| ScenarioError::Model {
        path: path.to_owned(),
        source,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ScenarioError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Runs a scenario file. With `out` set, logs, reports, traces and
/// snapshots are written below it.
pub fn run_scenario(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<ScenarioOutcome, ScenarioError> {
    let mut script = ScenarioScript::load(path)?;
    if let Some(seed) = seed {
        script.seed = seed;
    }
    run_script(&script, out)
}

pub fn run_script(script: &ScenarioScript, out: Option<&Path>) -> Result<ScenarioOutcome, ScenarioError> {
    script.validate()?;
    let model = load_model(&script.model)?;
    let mut cfg = script.config.clone();
    cfg.sim.seed = script.seed;

    if let Some(out) = out {
        if out.exists() {
            std::fs::remove_dir_all(out).map_err(io_err(out))?;
        }
        std::fs::create_dir_all(out.join("logs")).map_err(io_err(out))?;
    }
    let logs: BTreeMap<String, LogSource> = model
        .client_ids()
        .into_iter()
        .map(|c| {
            let source = match out {
                Some(out) => LogSource::File(out.join("logs").join(format!("{c}.log"))),
                None => LogSource::memory(),
            };
            (c, source)
        })
        .collect();
    for source in logs.values() {
        if let LogSource::File(p) = source {
            write(p, b"")?;
        }
    }

    let mut driver = Driver {
        model: Some(model),
        cfg,
        logs,
        deployment: None,
        assertions: Vec::new(),
        out: out.map(Path::to_owned),
    };
    for (i, step) in script.steps.iter().enumerate() {
        driver.step(i, step)?;
    }
    if let Some(d) = driver.deployment.as_mut() {
        d.bus.run_until_idle();
    }
    let reports = driver.reports();
    let (trace, logs) = match &driver.deployment {
        Some(d) => (
            d.bus.trace().to_vec(),
            d.logs.iter().map(|(c, l)| (c.clone(), l.read())).collect(),
        ),
        None => (Vec::new(), BTreeMap::new()),
    };
    let outcome = ScenarioOutcome {
        reports,
        assertions: driver.assertions,
        trace,
        logs,
    };
    if let Some(out) = out {
        write_outputs(out, &outcome, driver.deployment.as_mut())?;
    }
    Ok(outcome)
}

struct Driver {
    model: Option<SutModel>,
    cfg: DeploymentConfig,
    logs: BTreeMap<String, LogSource>,
    deployment: Option<Deployment>,
    assertions: Vec<AssertionResult>,
    out: Option<PathBuf>,
}

impl Driver {
    fn deployment(&mut self, step: usize) -> Result<&mut Deployment, ScenarioError> {
        self.deployment.as_mut().ok_or(ScenarioError::Step {
            step,
            message: "agents are not started".into(),
        })
    }

    fn reports(&mut self) -> Vec<FinalReport> {
        match self.deployment.as_mut() {
            Some(d) => reports_in(d.tester_inbox()),
            None => Vec::new(),
        }
    }

    fn step(&mut self, i: usize, step: &Step) -> Result<(), ScenarioError> {
        let fail = |message: String| ScenarioError::Step { step: i, message };
        if let Action::StartAgents = step.action {
            let model = self.model.take().ok_or_else(|| fail("agents already started".into()))?;
            let mut d = Deployment::start(model, self.cfg.clone(), self.logs.clone())?;
            d.bus.advance_to(step.tick);
            self.deployment = Some(d);
            return Ok(());
        }
        let d = self.deployment(i)?;
        d.bus.advance_to(step.tick);
        match &step.action {
            Action::StartAgents => unreachable!("handled above"),
            Action::RunUnit => {
                d.request(TestingType::Unit, Fields::new());
            }
            Action::RunIntegration => {
                d.request(TestingType::Integration, Fields::new());
            }
            Action::RequestRegression => {
                d.request(TestingType::Regression, Fields::new());
            }
            Action::RunStress { volume, intervals } => {
                let params: Fields = [
                    ("volume".to_owned(), Value::Int(*volume as i64)),
                    ("intervals".to_owned(), Value::Int(*intervals as i64)),
                ]
                .into();
                d.request(TestingType::Stress, params);
            }
            Action::SetFault { id, on } => d.sut.set_fault(id, *on).map_err(|e| fail(e.to_string()))?,
            Action::RunUserSession {
                client,
                script,
                faults_active,
            } => {
                let log = d
                    .logs
                    .get(client)
                    .ok_or_else(|| fail(format!("unknown client `{client}`")))?;
                let bytes =
                    run_user_session(&d.sut, client, script, *faults_active).map_err(|e| fail(e.to_string()))?;
                log.append(&bytes).map_err(|e| fail(e.to_string()))?;
            }
            Action::SetBusy { client, until } => {
                let control = d
                    .controls
                    .get(client)
                    .ok_or_else(|| fail(format!("unknown client `{client}`")))?;
                control.lock().expect("control lock").busy_until = *until;
            }
            Action::Stall { client, on } => {
                let control = d
                    .controls
                    .get(client)
                    .ok_or_else(|| fail(format!("unknown client `{client}`")))?;
                control.lock().expect("control lock").stalled = *on;
            }
            Action::UpdateModel { model } => {
                let model = load_model(model)?;
                d.sut.replace_model(model);
            }
            Action::Maintain => {
                d.bus.inject(AgentId::TESTER, AgentId::DRA, MessageBody::StatusQuery {});
            }
            Action::Snapshot => {
                let bytes = d.store.lock().expect("store lock").snapshot();
                if let Some(out) = &self.out {
                    write(&out.join("snapshots").join(format!("dra-{:06}.json", step.tick)), bytes)?;
                }
            }
            Action::AssertReport(expect) => {
                d.bus.run_until_idle();
                let failures = check(d, expect);
                self.assertions.push(AssertionResult {
                    step: i,
                    tick: step.tick,
                    failures,
                });
            }
        }
        Ok(())
    }
}

fn reports_in(inbox: &[Envelope]) -> Vec<FinalReport> {
    inbox
        .iter()
        .filter_map(|e| match &e.body {
            MessageBody::AggregateReport { report } => Some(report.clone()),
            _ => None,
        })
        .collect()
}

fn check(d: &mut Deployment, e: &Expectation) -> Vec<String> {
    let mut failures = Vec::new();
    let reports = reports_in(d.tester_inbox());
    let mut expect = |ok: bool, what: String| {
        if !ok {
            failures.push(what);
        }
    };
    if let Some(n) = e.reports {
        expect(
            reports.len() == n,
            format!("expected {n} reports, got {}", reports.len()),
        );
    }
    let report = match &e.report {
        Some(id) => reports.iter().rev().find(|r| &r.run_id == id),
        None => reports.last(),
    };
    let wants_report = e.defects.is_some()
        || e.defect_count.is_some()
        || e.context_keys.is_some()
        || e.dispatched_muas.is_some()
        || e.partial.is_some()
        || e.missing_agents.is_some()
        || e.attribution.is_some()
        || e.failure_intensity.is_some()
        || e.defects_per_interval.is_some()
        || e.all_verdicts.is_some();
    match report {
        None if wants_report => expect(
            false,
            format!("no report {}", e.report.as_deref().unwrap_or("received")),
        ),
        None => {}
        Some(r) => {
            let id = &r.run_id;
            if let Some(keys) = &e.defects {
                let got = r.defect_keys();
                expect(&got == keys, format!("{id}: defects {got:?}, expected {keys:?}"));
            }
            if let Some(n) = e.defect_count {
                expect(
                    r.defects.len() == n,
                    format!("{id}: {} defects, expected {n}", r.defects.len()),
                );
            }
            if let Some(keys) = &e.context_keys {
                for d in &r.defects {
                    for k in keys {
                        expect(d.context.contains_key(k), format!("{id}: defect context lacks `{k}`"));
                    }
                }
            }
            if let Some(n) = e.dispatched_muas {
                let got = r.dispatched_muas.len();
                expect(got == n, format!("{id}: {got} mobile agents dispatched, expected {n}"));
            }
            if let Some(p) = e.partial {
                expect(r.partial == p, format!("{id}: partial is {}, expected {p}", r.partial));
            }
            if let Some(m) = &e.missing_agents {
                let got: Vec<AgentId> = r.missing_agents.iter().copied().collect();
                expect(&got == m, format!("{id}: missing agents {got:?}, expected {m:?}"));
            }
            if let Some(attrs) = &e.attribution {
                let got: Vec<ExpectedAttribution> = r
                    .attributions
                    .iter()
                    .map(|a| ExpectedAttribution {
                        defect_type: a.key.defect_type.clone(),
                        operation_name: a.key.operation_name.clone(),
                        tier: a.tier,
                    })
                    .collect();
                expect(&got == attrs, format!("{id}: attributions {got:?}, expected {attrs:?}"));
            }
            if let Some(lambda) = e.failure_intensity {
                let got = r.reliability.as_ref().map(|x| x.failure_intensity);
                expect(
                    got == Some(lambda),
                    format!("{id}: failure intensity {got:?}, expected {lambda}"),
                );
            }
            if let Some(per) = &e.defects_per_interval {
                let got = r.reliability.as_ref().map(|x| x.defects_per_interval.clone());
                expect(
                    got.as_ref() == Some(per),
                    format!("{id}: defects per interval {got:?}, expected {per:?}"),
                );
            }
            if let Some(v) = e.all_verdicts {
                let bad = r.all_results().filter(|x| x.verdict != v).count();
                expect(bad == 0, format!("{id}: {bad} results are not {v:?}"));
            }
        }
    }
    if let Some(n) = e.stored_cases {
        let got = d.store.lock().expect("store lock").len() as u64;
        expect(got == n, format!("repository stores {got} cases, expected {n}"));
    }
    if let Some(per_client) = &e.log_errors {
        for (client, n) in per_client {
            let got = d.logs.get(client).map(|l| log_errors(&l.read()).len()).unwrap_or(0);
            expect(got == *n, format!("{client} log has {got} error entries, expected {n}"));
        }
    }
    if let Some(flow) = &e.flow {
        let timeline = timeline(d);
        failures.extend(check_flow(&timeline, flow));
    }
    failures
}

fn log_errors(bytes: &[u8]) -> Vec<LogEntry> {
    bytes
        .split(|&b| b == b'\n')
        .filter_map(|line| serde_json::from_slice::<LogEntry>(line).ok())
        .filter(|e| matches!(e.outcome, LogOutcome::Error { .. }))
        .collect()
}

/// A log error or a delivered envelope, in tick order; log entries sort
/// before envelopes delivered at the same tick.
pub enum Event {
    Log(LogEntry),
    Message(TraceRecord),
}

impl Event {
    fn tick(&self) -> Tick {
        match self {
            Event::Log(e) => e.tick,
            Event::Message(r) => r.delivered_at,
        }
    }
}

fn timeline(d: &Deployment) -> Vec<Event> {
    let mut events: Vec<Event> = d
        .logs
        .values()
        .flat_map(|l| log_errors(&l.read()))
        .map(Event::Log)
        .collect();
    events.extend(d.bus.trace().iter().cloned().map(Event::Message));
    // stable: logs first at equal ticks, then delivery order
    events.sort_by_key(|e| (e.tick(), matches!(e, Event::Message(_))));
    events
}

fn agent_matches(pattern: &Option<String>, id: AgentId) -> bool {
    match pattern {
        None => true,
        Some(p) => {
            let text = id.to_string();
            text == *p || text.strip_prefix(p.as_str()).is_some_and(|rest| rest.starts_with('-'))
        }
    }
}

fn step_matches(step: &FlowStep, event: &Event) -> bool {
    let key_ok = |dt: &str, op: &str| {
        step.defect_type.as_deref().is_none_or(|t| t == dt) && step.operation_name.as_deref().is_none_or(|o| o == op)
    };
    match event {
        Event::Log(entry) => {
            let LogOutcome::Error { defect_type, .. } = &entry.outcome else {
                return false;
            };
            step.kind == "log_error" && step.ingest.is_none() && key_ok(defect_type, &entry.operation_name)
        }
        Event::Message(record) => {
            let env = &record.envelope;
            if env.kind() != step.kind
                || !agent_matches(&step.from, env.header.sender)
                || !agent_matches(&step.to, env.header.recipient)
            {
                return false;
            }
            match &env.body {
                MessageBody::DefectNotice { report } | MessageBody::TestCaseForward { report } => {
                    step.ingest.is_none() && key_ok(&report.defect_type, &report.operation_name)
                }
                MessageBody::AggregateReport { report } => {
                    if let Some(outcome) = step.ingest {
                        let ingested = report.repository.as_ref().map(|r| r.ingested.as_slice()).unwrap_or(&[]);
                        if !ingested
                            .iter()
                            .any(|i| i.outcome == outcome && key_ok(&i.key.defect_type, &i.key.operation_name))
                        {
                            return false;
                        }
                        return true;
                    }
                    if step.defect_type.is_none() && step.operation_name.is_none() {
                        return true;
                    }
                    // a report matches a key only when that is its one defect
                    let keys: Vec<DedupKey> = report.defects.iter().filter_map(|d| d.dedup_key().ok()).collect();
                    keys.len() == 1 && key_ok(&keys[0].defect_type, &keys[0].operation_name)
                }
                _ => step.defect_type.is_none() && step.operation_name.is_none() && step.ingest.is_none(),
            }
        }
    }
}

fn check_flow(timeline: &[Event], flow: &[FlowStep]) -> Vec<String> {
    let mut failures = Vec::new();
    let mut from = 0;
    for (n, step) in flow.iter().enumerate() {
        match timeline[from..].iter().position(|e| step_matches(step, e)) {
            Some(p) => from += p + 1,
            None => {
                failures.push(format!("flow step {n} ({}) not found in order", step.kind));
                break;
            }
        }
    }
    for (n, step) in flow.iter().enumerate() {
        if let Some(want) = step.count {
            let got = timeline.iter().filter(|e| step_matches(step, e)).count();
            if got != want {
                failures.push(format!(
                    "flow step {n} ({}) matched {got} times, expected {want}",
                    step.kind
                ));
            }
        }
    }
    failures
}

fn write_outputs(out: &Path, outcome: &ScenarioOutcome, d: Option<&mut Deployment>) -> Result<(), ScenarioError> {
    let trace: String = outcome.trace.iter().map(TraceRecord::to_line).collect();
    write(&out.join("trace.jsonl"), trace)?;
    let mut delivered: BTreeMap<&str, Tick> = BTreeMap::new();
    for r in &outcome.trace {
        if let MessageBody::AggregateReport { report } = &r.envelope.body {
            if r.envelope.header.recipient == AgentId::TESTER {
                delivered.insert(&report.run_id, r.delivered_at);
            }
        }
    }
    for report in &outcome.reports {
        let dir = out.join(&report.run_id);
        let mut json = canonical_text(report);
        json.push('\n');
        write(&dir.join("report.json"), json)?;
        write(&dir.join("report.txt"), render_report(report))?;
        let end = delivered
            .get(report.run_id.as_str())
            .copied()
            .unwrap_or(report.finished);
        let lines: String = outcome
            .trace
            .iter()
            .filter(|r| (report.started..=end).contains(&r.delivered_at))
            .map(TraceRecord::to_line)
            .collect();
        write(&dir.join("trace.jsonl"), lines)?;
    }
    if let Some(d) = d {
        write(
            &out.join("repository.json"),
            d.store.lock().expect("store lock").snapshot(),
        )?;
    }
    let mut summary = String::new();
    for a in &outcome.assertions {
        let verdict = if a.passed() { "pass" } else { "FAIL" };
        let _ = writeln!(summary, "step {} (tick {}): {verdict}", a.step, a.tick);
        for f in &a.failures {
            let _ = writeln!(summary, "  {f}");
        }
    }
    write(&out.join("assertions.txt"), summary)
}

/// Human-readable report.
pub fn render_report(r: &FinalReport) -> String {
    let mut s = String::new();
    let ty = r
        .testing_type
        .map(|t| t.to_string())
        .unwrap_or_else(|| "Monitoring".into());
    let _ = writeln!(s, "report {} ({ty}), ticks {}..{}", r.run_id, r.started, r.finished);
    if r.partial {
        let missing: Vec<String> = r.missing_agents.iter().map(AgentId::to_string).collect();
        let _ = writeln!(s, "PARTIAL: no result from {}", missing.join(", "));
    }
    for (agent, results) in &r.per_agent_results {
        let count = |v: Verdict| results.iter().filter(|x| x.verdict == v).count();
        let _ = write!(
            s,
            "  {agent}: {} pass, {} fail, {} error",
            count(Verdict::Pass),
            count(Verdict::Fail),
            count(Verdict::Error)
        );
        if let Some(c) = r.coverage.get(agent) {
            let _ = write!(s, ", {:?} {}/{}", c.criterion, c.covered, c.total);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "defects: {}", r.defects.len());
    for d in &r.defects {
        let _ = write!(
            s,
            "  {} @ {} found by {} at tick {}",
            d.defect_type, d.operation_name, d.discovered_by, d.timestamp
        );
        let tier = r
            .attributions
            .iter()
            .find(|a| a.key.defect_type == d.defect_type && a.key.operation_name == d.operation_name)
            .and_then(|a| a.tier);
        if let Some(t) = tier {
            let _ = write!(s, " (tier: {})", t.label());
        }
        s.push('\n');
    }
    if !r.dispatched_muas.is_empty() {
        let muas: Vec<String> = r.dispatched_muas.iter().map(AgentId::to_string).collect();
        let _ = writeln!(s, "mobile agents dispatched: {} ({})", muas.len(), muas.join(", "));
    }
    if let Some(rel) = &r.reliability {
        let _ = writeln!(
            s,
            "reliability: {} intervals, defects per interval {:?}, failure intensity {}, one-interval reliability {:.6}",
            rel.intervals, rel.defects_per_interval, rel.failure_intensity, rel.reliability_one_interval
        );
    }
    if let Some(repo) = &r.repository {
        let _ = writeln!(
            s,
            "repository: {} stored cases, {} expected outputs",
            repo.stored_cases, repo.expected_outputs
        );
        for i in &repo.ingested {
            let _ = writeln!(
                s,
                "  ingested {} @ {}: {:?}",
                i.key.defect_type, i.key.operation_name, i.outcome
            );
        }
        for id in &repo.removed {
            let _ = writeln!(s, "  removed {id}");
        }
    }
    s
}
