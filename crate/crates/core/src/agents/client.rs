//! Client checker agent: client-tier unit tests with control-flow coverage,
//! test execution for the controller, and user-log monitoring while idle.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::exec::{distinct_defects, Executor};
use crate::bus::{Agent, Ctx};
use crate::coverage::{control_flow_coverage, CoverageSummary, Criterion};
use crate::domain::{dedup_key, AgentId, DedupKey, DefectReport, DomainError, Origin, TestCase, TestingType, Tick};
use crate::protocol::{Envelope, MessageBody, MessageId, ResultReport, TestRequest};
use crate::sut::{LogEntry, LogOutcome, Scope, Sut};

/// Where a client's user log lives.
#[derive(Debug, Clone, Default)]
pub enum LogSource {
    #[default]
    None,
    Memory(Arc<Mutex<Vec<u8>>>),
    File(PathBuf),
}

impl LogSource {
    pub fn memory() -> Self {
        LogSource::Memory(Arc::new(Mutex::new(Vec::new())))
    }

    /// Whole current log; a missing file reads as empty.
    pub fn read(&self) -> Vec<u8> {
        match self {
            LogSource::None => Vec::new(),
            LogSource::Memory(buf) => buf.lock().expect("log lock").clone(),
            LogSource::File(path) => std::fs::read(path).unwrap_or_default(),
        }
    }

    pub fn append(&self, bytes: &[u8]) -> std::io::Result<()> {
        match self {
            LogSource::None => Ok(()),
            LogSource::Memory(buf) => {
                buf.lock().expect("log lock").extend_from_slice(bytes);
                Ok(())
            }
            LogSource::File(path) => {
                use std::io::Write;
                let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
                f.write_all(bytes)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScanError {
    #[error("log corrupt at byte {offset} (entry {entry}): {reason}")]
    LogCorrupt { offset: u64, entry: u64, reason: String },
}

/// Read position in a user log plus the keys already reported per session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorState {
    pub offset: u64,
    pub entries: u64,
    pub reported: BTreeMap<String, BTreeSet<DedupKey>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutcome {
    pub reports: Vec<DefectReport>,
    /// Set when scanning stopped at an unparseable line.
    pub error: Option<ScanError>,
}

/// Scans complete lines after `state.offset`. A trailing line without a
/// newline is left for the next scan.
pub fn scan_log(state: &mut MonitorState, log: &[u8], discovered_by: AgentId) -> ScanOutcome {
    let mut reports = Vec::new();
    let start = (state.offset as usize).min(log.len());
    let mut pos = start;
    while let Some(nl) = log[pos..].iter().position(|&b| b == b'\n') {
        let line = &log[pos..pos + nl];
        let entry: LogEntry = match std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|text| serde_json::from_str(text).map_err(|e| e.to_string()))
        {
            Ok(entry) => entry,
            Err(reason) => {
                return ScanOutcome {
                    reports,
                    error: Some(ScanError::LogCorrupt {
                        offset: pos as u64,
                        entry: state.entries,
                        reason,
                    }),
                }
            }
        };
        if let LogOutcome::Error { defect_type, context } = &entry.outcome {
            if let Some(report) = report_from_entry(&entry, defect_type, context, discovered_by) {
                let key = dedup_key(&report).expect("report from a non-empty entry");
                if state.reported.entry(entry.session.clone()).or_default().insert(key) {
                    reports.push(report);
                }
            }
        }
        pos += nl + 1;
        state.offset = pos as u64;
        state.entries += 1;
    }
    ScanOutcome { reports, error: None }
}

fn report_from_entry(
    entry: &LogEntry,
    defect_type: &str,
    context: &crate::domain::Fields,
    by: AgentId,
) -> Option<DefectReport> {
    if defect_type.is_empty() || entry.operation_name.is_empty() {
        return None;
    }
    // replay the logged action verbatim
    let case = TestCase::new(
        format!("{by}-{}-{}", entry.session, entry.tick),
        entry.operation_name.clone(),
        entry.input.clone(),
    )
    .discovered(defect_type, Origin::DiscoveredByCCA);
    Some(DefectReport {
        operation_name: entry.operation_name.clone(),
        defect_type: defect_type.to_owned(),
        provoking_case: case,
        discovered_by: by,
        context: context.clone(),
        timestamp: entry.tick,
    })
}

/// Builds the notice for a report, refusing reports without a dedup key.
pub fn report_defect(report: DefectReport) -> Result<MessageBody, DomainError> {
    dedup_key(&report)?;
    Ok(MessageBody::DefectNotice { report })
}

/// Load and availability of a client site, set by the scenario driver.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientControl {
    /// The client reports busy until this tick.
    pub busy_until: Tick,
    /// A stalled agent swallows test requests without answering.
    pub stalled: bool,
}

pub type ControlHandle = Arc<Mutex<ClientControl>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub controller: AgentId,
    pub criterion: Criterion,
    /// Ticks between log scans; 0 disables monitoring.
    pub poll_interval: Tick,
    pub case_cost: Tick,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            controller: AgentId::MCA,
            criterion: Criterion::NodeCoverage,
            poll_interval: 10,
            case_cost: 1,
        }
    }
}

/// Runs a request the way a client-site agent does and builds its report.
pub fn execute_request(
    sut: &Sut,
    me: AgentId,
    client: &str,
    origin: Origin,
    req: &TestRequest,
    criterion: Criterion,
    start: Tick,
    case_cost: Tick,
) -> (ResultReport, Vec<Tick>) {
    let unit = req.testing_type == TestingType::Unit;
    let exec = Executor::new(sut, me)
        .at_client(client)
        .scope(if unit { Scope::ClientOnly } else { Scope::EndToEnd })
        .origin(origin)
        .case_cost(case_cost);
    let run = exec.run(&req.suite.cases, start);
    let coverage = if unit {
        client_coverage(sut, client, &run.traces, criterion)
    } else {
        None
    };
    (
        ResultReport {
            results: run.results,
            coverage,
            partial: false,
        },
        run.completed_at,
    )
}

fn client_coverage(
    sut: &Sut,
    client: &str,
    traces: &BTreeMap<String, Vec<crate::coverage::ExecutionTrace>>,
    criterion: Criterion,
) -> Option<CoverageSummary> {
    let model = sut.model();
    let component = &model.client(client)?.component;
    let graph = model.graph(component)?;
    let walked = traces.get(component).map(Vec::as_slice).unwrap_or(&[]);
    control_flow_coverage(graph, walked, criterion).ok()
}

struct Outgoing {
    to: AgentId,
    correlation: MessageId,
    report: ResultReport,
}

const POLL: u64 = 0;

pub struct ClientAgent {
    id: AgentId,
    client: String,
    sut: Arc<Sut>,
    log: LogSource,
    control: ControlHandle,
    cfg: ClientConfig,
    monitor: MonitorState,
    outgoing: BTreeMap<u64, Outgoing>,
    next_token: u64,
    scan_errors: Vec<ScanError>,
}

impl ClientAgent {
    pub fn new(id: AgentId, client: impl Into<String>, sut: Arc<Sut>, log: LogSource, cfg: ClientConfig) -> Self {
        ClientAgent {
            id,
            client: client.into(),
            sut,
            log,
            control: ControlHandle::default(),
            cfg,
            monitor: MonitorState::default(),
            outgoing: BTreeMap::new(),
            next_token: POLL + 1,
            scan_errors: Vec::new(),
        }
    }

    pub fn with_control(mut self, control: ControlHandle) -> Self {
        self.control = control;
        self
    }

    fn busy(&self, now: Tick) -> bool {
        !self.outgoing.is_empty() || self.control.lock().expect("control lock").busy_until > now
    }

    fn poll(&mut self, ctx: &mut Ctx<'_>) {
        let log = self.log.read();
        let outcome = scan_log(&mut self.monitor, &log, self.id);
        if let Some(e) = outcome.error {
            if self.scan_errors.last() != Some(&e) {
                self.scan_errors.push(e);
            }
        }
        for report in outcome.reports {
            if let Ok(body) = report_defect(report) {
                ctx.send(self.cfg.controller, body);
            }
        }
    }

    fn start_request(&mut self, env: &Envelope, req: &TestRequest, ctx: &mut Ctx<'_>) {
        let busy_until = self.control.lock().expect("control lock").busy_until;
        let start = ctx.now().max(busy_until);
        let (report, completed) = execute_request(
            &self.sut,
            self.id,
            &self.client,
            Origin::DiscoveredByCCA,
            req,
            self.cfg.criterion,
            start,
            self.cfg.case_cost,
        );
        let done = completed.last().copied().unwrap_or(start);
        let token = self.next_token;
        self.next_token += 1;
        self.outgoing.insert(
            token,
            Outgoing {
                to: env.header.sender,
                correlation: env.header.message_id,
                report,
            },
        );
        ctx.set_timer(done.saturating_sub(ctx.now()), token);
    }
}

impl Agent for ClientAgent {
    fn id(&self) -> AgentId {
        self.id
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        if self.cfg.poll_interval > 0 && !matches!(self.log, LogSource::None) {
            ctx.set_background_timer(self.cfg.poll_interval, POLL);
        }
    }

    fn handle(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        match &env.body {
            MessageBody::StatusQuery {} => {
                let busy = self.busy(ctx.now());
                ctx.reply(&env, MessageBody::StatusReply { busy });
            }
            MessageBody::TestRequest(req) => {
                if self.control.lock().expect("control lock").stalled {
                    return;
                }
                let req = req.clone();
                self.start_request(&env, &req, ctx);
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        if token == POLL {
            // monitoring only runs between test requests
            if self.outgoing.is_empty() {
                self.poll(ctx);
            }
            ctx.set_background_timer(self.cfg.poll_interval, POLL);
            return;
        }
        let Some(out) = self.outgoing.remove(&token) else {
            return;
        };
        for report in distinct_defects(&out.report.results) {
            if let Ok(body) = report_defect(report) {
                ctx.send_correlated(out.to, body, Some(out.correlation));
            }
        }
        ctx.send_correlated(out.to, MessageBody::ResultReport(out.report), Some(out.correlation));
    }
}
