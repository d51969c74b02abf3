//! Middleware controller agent: middleware unit testing plus orchestration of
//! integration, regression and stress runs over the client agents.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::exec::{distinct_defects, param_u64, Executor};
use super::mobile::{MobileAgent, MobileConfig, MuaPool};
use crate::bus::{Agent, Ctx};
use crate::coverage::{dataflow_coverage, ComponentGraph, CoverageError, CoverageSummary, Criterion};
use crate::domain::{
    AgentId, DefectReport, Fields, Keyed, TestCase, TestResult, TestSuite, TestingType, Tick, Tier, Value, Verdict,
};
use crate::parallel::partition;
use crate::protocol::{
    dedup_defects, Attribution, Envelope, FinalReport, MessageBody, MessageId, RepositorySummary, ResultReport,
    TestRequest,
};
use crate::reliability;
use crate::sut::{Scope, Sut};

/// Executes `suite` against the middleware tier alone and measures all-uses
/// coverage of the middleware graph `g`.
pub fn run_middleware_unit_test(
    sut: &Sut,
    me: AgentId,
    suite: &TestSuite,
    g: &ComponentGraph,
    start: Tick,
) -> Result<(Vec<TestResult>, CoverageSummary), CoverageError> {
    if suite.is_empty() {
        let vacuous = CoverageSummary {
            criterion: Criterion::AllUses,
            covered: 0,
            total: 0,
            ratio: 1.0,
            uncovered_items: Vec::new(),
        };
        return Ok((Vec::new(), vacuous));
    }
    let run = Executor::new(sut, me)
        .scope(Scope::MiddlewareOnly)
        .run(&suite.cases, start);
    let model = sut.model();
    let walked = run.traces.get(&model.middleware).map(Vec::as_slice).unwrap_or(&[]);
    let coverage = dataflow_coverage(g, walked, Criterion::AllUses)?;
    Ok((run.results, coverage))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub tester: AgentId,
    pub run_deadline: Tick,
    /// How long a regression run waits for status replies.
    pub status_deadline: Tick,
    /// Length of one stress interval in ticks.
    pub stress_interval: Tick,
    /// Defaults to the number of clients.
    pub mua_pool: Option<usize>,
    pub mobile: MobileConfig,
    /// Run ids continue from here, so separate sessions do not reuse them.
    pub run_offset: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            tester: AgentId::TESTER,
            run_deadline: 1000,
            status_deadline: 20,
            stress_interval: 100,
            mua_pool: None,
            mobile: MobileConfig::default(),
            run_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub client: String,
    pub agent: AgentId,
    pub busy: bool,
    pub last_status: Option<Tick>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Suite,
    Status,
    Executing,
    DataCheck,
    Settling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Purpose {
    Suite,
    Status(AgentId),
    Exec,
    DataCheck,
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimerKind {
    Deadline,
    Status,
    Chunk(usize),
}

struct Stress {
    t0: Tick,
    chunks: Vec<Vec<TestCase>>,
    launched: usize,
}

#[derive(Default)]
struct Checks {
    data: Option<BTreeMap<String, Verdict>>,
    middleware: BTreeMap<String, Verdict>,
}

struct Run {
    report: FinalReport,
    requester: AgentId,
    request: MessageId,
    params: Fields,
    phase: Phase,
    deadline_at: Tick,
    deadline_token: u64,
    suite: TestSuite,
    pending: BTreeMap<MessageId, AgentId>,
    acks: usize,
    notices: Vec<DefectReport>,
    status: BTreeMap<AgentId, Option<bool>>,
    status_token: Option<u64>,
    stress: Option<Stress>,
    checks: Option<Checks>,
}

pub struct ControllerAgent {
    sut: Arc<Sut>,
    cfg: ControllerConfig,
    clients: Vec<ClientEntry>,
    pool: MuaPool,
    runs: BTreeMap<String, Run>,
    run_seq: u64,
    monitor_seq: u64,
    correlations: BTreeMap<MessageId, (String, Purpose)>,
    monitor_forwards: BTreeMap<MessageId, (AgentId, DefectReport)>,
    timers: BTreeMap<u64, (String, TimerKind)>,
    next_token: u64,
}

impl ControllerAgent {
    /// `clients` pairs each simulated client with its checker agent.
    pub fn new(sut: Arc<Sut>, clients: Vec<(String, AgentId)>, cfg: ControllerConfig) -> Self {
        let capacity = cfg.mua_pool.unwrap_or(clients.len());
        let pool = MuaPool::new(capacity, clients.iter().map(|(c, _)| c.clone()));
        ControllerAgent {
            sut,
            cfg,
            clients: clients
                .into_iter()
                .map(|(client, agent)| ClientEntry {
                    client,
                    agent,
                    busy: false,
                    last_status: None,
                })
                .collect(),
            pool,
            runs: BTreeMap::new(),
            run_seq: cfg.run_offset,
            monitor_seq: 0,
            correlations: BTreeMap::new(),
            monitor_forwards: BTreeMap::new(),
            timers: BTreeMap::new(),
            next_token: 1,
        }
    }

    pub fn clients(&self) -> &[ClientEntry] {
        &self.clients
    }

    fn timer(&mut self, ctx: &mut Ctx<'_>, run_id: &str, kind: TimerKind, delay: Tick) -> u64 {
        let token = self.next_token;
        self.next_token += 1;
        self.timers.insert(token, (run_id.to_owned(), kind));
        ctx.set_timer(delay, token);
        token
    }

    fn send(&mut self, ctx: &mut Ctx<'_>, run_id: &str, purpose: Purpose, to: AgentId, body: MessageBody) -> MessageId {
        let id = ctx.send(to, body);
        self.correlations.insert(id, (run_id.to_owned(), purpose));
        id
    }

    fn start_run(&mut self, env: &Envelope, req: &TestRequest, ctx: &mut Ctx<'_>) {
        self.run_seq += 1;
        let run_id = format!("run-{:03}", self.run_seq);
        let ty = req.testing_type;
        let mut deadline = param_u64(&req.params, "deadline").unwrap_or(self.cfg.run_deadline);
        if ty == TestingType::Stress {
            let intervals = param_u64(&req.params, "intervals").unwrap_or(1);
            deadline = deadline.saturating_add(intervals.saturating_mul(self.cfg.stress_interval));
        }
        let deadline_token = self.timer(ctx, &run_id, TimerKind::Deadline, deadline);
        let run = Run {
            report: FinalReport::new(&run_id, Some(ty), ctx.now()),
            requester: env.header.sender,
            request: env.header.message_id,
            params: req.params.clone(),
            phase: Phase::Suite,
            deadline_at: ctx.now() + deadline.max(1),
            deadline_token,
            suite: req.suite.clone(),
            pending: BTreeMap::new(),
            acks: 0,
            notices: Vec::new(),
            status: BTreeMap::new(),
            status_token: None,
            stress: None,
            checks: None,
        };
        self.runs.insert(run_id.clone(), run);

        if !req.suite.is_empty() {
            return self.on_suite(&run_id, req.suite.clone(), ctx);
        }
        let mut constraints = Fields::new();
        match ty {
            TestingType::Regression => {
                let ops = self
                    .sut
                    .model()
                    .operations
                    .iter()
                    .map(|o| Value::from(o.name.as_str()))
                    .collect();
                constraints.insert("operations".into(), Value::List(ops));
            }
            TestingType::Stress => {
                let volume = req.params.get("volume").cloned().unwrap_or(Value::Int(1));
                constraints.insert("volume".into(), volume);
            }
            _ => {}
        }
        self.send(
            ctx,
            &run_id,
            Purpose::Suite,
            AgentId::DRA,
            MessageBody::SuiteRequest {
                testing_type: ty,
                constraints,
            },
        );
    }

    fn on_suite(&mut self, run_id: &str, suite: TestSuite, ctx: &mut Ctx<'_>) {
        let Some(run) = self.runs.get_mut(run_id) else {
            return;
        };
        run.suite = suite;
        run.phase = Phase::Executing;
        match run.report.testing_type {
            Some(TestingType::Unit) => self.launch_unit(run_id, ctx),
            Some(TestingType::Integration) => {
                let suite = run.suite.clone();
                self.launch_streams(run_id, &suite, TestingType::Integration, ctx);
            }
            Some(TestingType::Regression) => self.query_status(run_id, ctx),
            Some(TestingType::Stress) => self.plan_stress(run_id, ctx),
            None => {}
        }
        self.progress(run_id, ctx);
    }

    fn request(ty: TestingType, id: &str, cases: Vec<TestCase>) -> TestRequest {
        let suite = TestSuite::new(id, ty, cases).expect("cases come from a valid suite");
        TestRequest::new(suite)
    }

    fn launch_unit(&mut self, run_id: &str, ctx: &mut Ctx<'_>) {
        let model = self.sut.model();
        let run = self.runs.get_mut(run_id).expect("live run");
        let middleware: Vec<TestCase> = run
            .suite
            .cases
            .iter()
            .filter(|c| {
                model
                    .operation(&c.operation_name)
                    .is_some_and(|op| op.traverses(Tier::Middleware))
            })
            .cloned()
            .collect();
        let mw_suite = TestSuite::new(format!("{run_id}-middleware"), TestingType::Unit, middleware)
            .expect("cases come from a valid suite");
        let g = model.middleware_graph();
        if let Ok((results, coverage)) = run_middleware_unit_test(&self.sut, AgentId::MCA, &mw_suite, g, ctx.now()) {
            run.report.coverage.insert(AgentId::MCA, coverage);
            let defects = distinct_defects(&results);
            run.report.per_agent_results.insert(AgentId::MCA, results);
            for d in defects {
                self.forward(run_id, d, ctx);
            }
        }
        let run = &self.runs[run_id];
        let streams: Vec<(AgentId, Vec<TestCase>)> = self
            .clients
            .iter()
            .map(|entry| {
                let cases = run
                    .suite
                    .cases
                    .iter()
                    .filter(|c| {
                        model
                            .operation(&c.operation_name)
                            .is_none_or(|op| op.hosted_on(&entry.client))
                    })
                    .cloned()
                    .collect();
                (entry.agent, cases)
            })
            .collect();
        for (agent, cases) in streams {
            if cases.is_empty() {
                continue;
            }
            let req = Self::request(TestingType::Unit, &format!("{run_id}-{agent}"), cases);
            let id = self.send(ctx, run_id, Purpose::Exec, agent, MessageBody::TestRequest(req));
            self.runs.get_mut(run_id).expect("live run").pending.insert(id, agent);
        }
    }

    /// Round-robin over all client agents; empty streams are not sent.
    fn launch_streams(&mut self, run_id: &str, cases: &TestSuite, ty: TestingType, ctx: &mut Ctx<'_>) {
        let agents: Vec<AgentId> = self.clients.iter().map(|c| c.agent).collect();
        let Ok(plan) = partition(run_id, cases, &agents) else {
            return;
        };
        for stream in plan.streams {
            if stream.cases.is_empty() {
                continue;
            }
            let req = Self::request(ty, &format!("{run_id}-{}", stream.executor), stream.cases);
            let id = self.send(
                ctx,
                run_id,
                Purpose::Exec,
                stream.executor,
                MessageBody::TestRequest(req),
            );
            self.runs
                .get_mut(run_id)
                .expect("live run")
                .pending
                .insert(id, stream.executor);
        }
    }

    fn query_status(&mut self, run_id: &str, ctx: &mut Ctx<'_>) {
        let agents: Vec<AgentId> = self.clients.iter().map(|c| c.agent).collect();
        for agent in agents {
            self.send(ctx, run_id, Purpose::Status(agent), agent, MessageBody::StatusQuery {});
            self.runs.get_mut(run_id).expect("live run").status.insert(agent, None);
        }
        let token = self.timer(ctx, run_id, TimerKind::Status, self.cfg.status_deadline);
        let run = self.runs.get_mut(run_id).expect("live run");
        run.status_token = Some(token);
        run.phase = Phase::Status;
    }

    /// Runs once every status reply is in or the status deadline passed.
    /// Busy or silent clients get an MUA in place of their checker.
    fn dispatch_regression(&mut self, run_id: &str, ctx: &mut Ctx<'_>) {
        let now = ctx.now();
        let Some(run) = self.runs.get_mut(run_id) else {
            return;
        };
        if let Some(token) = run.status_token.take() {
            ctx.cancel_timer(token);
            self.timers.remove(&token);
        }
        run.phase = Phase::Executing;
        for entry in &mut self.clients {
            if let Some(reply) = run.status.get(&entry.agent) {
                entry.busy = *reply != Some(false);
                if reply.is_some() {
                    entry.last_status = Some(now);
                }
            }
        }
        let agents: Vec<AgentId> = self.clients.iter().map(|c| c.agent).collect();
        let plan = match partition(run_id, &run.suite, &agents) {
            Ok(plan) => plan,
            Err(e) => return self.reject(run_id, e.to_string(), ctx),
        };
        let busy_streams = plan
            .streams
            .iter()
            .zip(&self.clients)
            .filter(|(s, c)| !s.cases.is_empty() && c.busy)
            .count();
        if busy_streams > self.pool.available() {
            let reason = format!(
                "NoCapacity: {busy_streams} busy clients, {} mobile agents available",
                self.pool.available()
            );
            return self.reject(run_id, reason, ctx);
        }
        let remaining = run.deadline_at.saturating_sub(now);
        for (stream, entry) in plan.streams.into_iter().zip(self.clients.clone()) {
            if stream.cases.is_empty() {
                continue;
            }
            let req = Self::request(
                TestingType::Regression,
                &format!("{run_id}-{}", entry.client),
                stream.cases,
            );
            if !entry.busy {
                let id = self.send(ctx, run_id, Purpose::Exec, entry.agent, MessageBody::TestRequest(req));
                self.runs
                    .get_mut(run_id)
                    .expect("live run")
                    .pending
                    .insert(id, entry.agent);
                continue;
            }
            let (mua, task) = self
                .pool
                .dispatch(&entry.client, req.clone(), now, remaining)
                .expect("capacity and client checked above");
            ctx.spawn(Box::new(MobileAgent::new(
                mua,
                task,
                Arc::clone(&self.sut),
                self.cfg.mobile,
            )));
            let body = MessageBody::DispatchAgent {
                target_client: entry.client.clone(),
                task: req,
            };
            let id = self.send(ctx, run_id, Purpose::Exec, mua, body);
            let run = self.runs.get_mut(run_id).expect("live run");
            run.pending.insert(id, mua);
            run.report.dispatched_muas.push(mua);
        }
    }

    fn plan_stress(&mut self, run_id: &str, ctx: &mut Ctx<'_>) {
        let run = self.runs.get_mut(run_id).expect("live run");
        let intervals = param_u64(&run.params, "intervals").unwrap_or(1);
        if intervals == 0 {
            return self.reject(run_id, "intervals must be positive".into(), ctx);
        }
        let cases = &run.suite.cases;
        let n = cases.len() as u64;
        let chunks = (0..intervals)
            .map(|j| cases[(j * n / intervals) as usize..((j + 1) * n / intervals) as usize].to_vec())
            .collect();
        run.stress = Some(Stress {
            t0: ctx.now(),
            chunks,
            launched: 0,
        });
        self.launch_chunk(run_id, 0, ctx);
        for j in 1..intervals {
            self.timer(ctx, run_id, TimerKind::Chunk(j as usize), j * self.cfg.stress_interval);
        }
    }

    fn launch_chunk(&mut self, run_id: &str, j: usize, ctx: &mut Ctx<'_>) {
        let Some(run) = self.runs.get_mut(run_id) else {
            return;
        };
        let Some(stress) = run.stress.as_mut() else {
            return;
        };
        stress.launched += 1;
        let chunk = stress.chunks[j].clone();
        let suite = TestSuite::new(format!("{run_id}-i{j}"), TestingType::Stress, chunk)
            .expect("cases come from a valid suite");
        self.launch_streams(run_id, &suite, TestingType::Stress, ctx);
    }

    fn forward(&mut self, run_id: &str, report: DefectReport, ctx: &mut Ctx<'_>) {
        self.send(
            ctx,
            run_id,
            Purpose::Forward,
            AgentId::DRA,
            MessageBody::TestCaseForward { report },
        );
        if let Some(run) = self.runs.get_mut(run_id) {
            run.acks += 1;
        }
    }

    fn reject(&mut self, run_id: &str, reason: String, ctx: &mut Ctx<'_>) {
        let Some(run) = self.runs.remove(run_id) else {
            return;
        };
        ctx.cancel_timer(run.deadline_token);
        self.forget(run_id);
        ctx.send_correlated(run.requester, MessageBody::Rejected { reason }, Some(run.request));
    }

    fn forget(&mut self, run_id: &str) {
        self.timers.retain(|_, (r, _)| r != run_id);
        // forwards stay so late acks are recognised and dropped
        self.correlations
            .retain(|_, (r, p)| r != run_id || *p == Purpose::Forward);
    }

    /// Moves a run on once its outstanding work is done.
    fn progress(&mut self, run_id: &str, ctx: &mut Ctx<'_>) {
        let Some(run) = self.runs.get_mut(run_id) else {
            return;
        };
        let launched_all = run.stress.as_ref().is_none_or(|s| s.launched == s.chunks.len());
        if run.phase == Phase::Executing && run.pending.is_empty() && launched_all {
            run.phase = Phase::Settling;
            if run.report.testing_type == Some(TestingType::Integration) {
                self.start_checks(run_id, ctx);
            }
        }
        let run = self.runs.get_mut(run_id).expect("live run");
        if run.phase == Phase::DataCheck && run.checks.as_ref().is_some_and(|c| c.data.is_some()) {
            run.phase = Phase::Settling;
        }
        if run.phase == Phase::Settling && run.acks == 0 {
            self.finish(run_id, ctx);
        }
    }

    /// Failing integration cases go to the repository for a data check and
    /// are replayed against the middleware alone.
    fn start_checks(&mut self, run_id: &str, ctx: &mut Ctx<'_>) {
        let run = self.runs.get_mut(run_id).expect("live run");
        let failing: BTreeSet<&str> = run
            .report
            .all_results()
            .filter(|r| r.verdict == Verdict::Fail)
            .map(|r| r.case_id.as_str())
            .collect();
        if failing.is_empty() {
            return;
        }
        let cases: Vec<TestCase> = run
            .suite
            .cases
            .iter()
            .filter(|c| failing.contains(c.id.as_str()))
            .cloned()
            .collect();
        let model = self.sut.model();
        let mw_cases: Vec<TestCase> = cases
            .iter()
            .filter(|c| {
                model
                    .operation(&c.operation_name)
                    .is_some_and(|op| op.traverses(Tier::Middleware))
            })
            .cloned()
            .collect();
        let replay = Executor::new(&self.sut, AgentId::MCA)
            .scope(Scope::MiddlewareOnly)
            .run(&mw_cases, ctx.now());
        let mut checks = Checks::default();
        for r in replay.results {
            checks.middleware.insert(r.case_id, r.verdict);
        }
        run.checks = Some(checks);
        run.phase = Phase::DataCheck;
        let req = Self::request(TestingType::Integration, &format!("{run_id}-data"), cases);
        self.send(
            ctx,
            run_id,
            Purpose::DataCheck,
            AgentId::DRA,
            MessageBody::TestRequest(req),
        );
    }

    fn finish(&mut self, run_id: &str, ctx: &mut Ctx<'_>) {
        let Some(mut run) = self.runs.remove(run_id) else {
            return;
        };
        ctx.cancel_timer(run.deadline_token);
        self.forget(run_id);
        let report = &mut run.report;
        report.finished = ctx.now();
        report.collect_defects();
        report.defects = dedup_defects(report.defects.iter().chain(&run.notices));
        if let Some(checks) = &run.checks {
            report.attributions = report.defects.iter().filter_map(|d| attribute(d, checks)).collect();
        }
        if let Some(stress) = &run.stress {
            let k = stress.chunks.len() as u64;
            let end = stress.t0 + k * self.cfg.stress_interval;
            let ticks: Vec<Tick> = report
                .all_results()
                .filter(|r| r.verdict == Verdict::Fail)
                .filter_map(|r| r.defect.as_ref())
                .map(|d| d.timestamp.clamp(stress.t0, end))
                .collect();
            report.reliability = reliability::estimate(&ticks, stress.t0, end, k).ok();
        }
        ctx.send_correlated(
            run.requester,
            MessageBody::AggregateReport { report: run.report },
            Some(run.request),
        );
    }

    fn on_deadline(&mut self, run_id: &str, ctx: &mut Ctx<'_>) {
        let Some(run) = self.runs.get_mut(run_id) else {
            return;
        };
        run.report.partial = true;
        let missing: Vec<AgentId> = match run.phase {
            Phase::Suite | Phase::DataCheck => vec![AgentId::DRA],
            Phase::Status => run
                .status
                .iter()
                .filter(|(_, s)| s.is_none())
                .map(|(a, _)| *a)
                .collect(),
            _ => run.pending.values().copied().collect(),
        };
        run.report.missing_agents.extend(missing);
        for agent in run.pending.values() {
            self.pool.release(*agent);
        }
        run.acks = 0;
        run.phase = Phase::Settling;
        self.finish(run_id, ctx);
    }

    fn on_result(&mut self, run_id: &str, env: &Envelope, report: &ResultReport, ctx: &mut Ctx<'_>) {
        let sender = env.header.sender;
        let Some(run) = self.runs.get_mut(run_id) else {
            return;
        };
        let Some(corr) = env.header.correlation_id else {
            return;
        };
        if run.pending.remove(&corr).is_none() {
            return;
        }
        if report.partial {
            run.report.partial = true;
            run.report.missing_agents.insert(sender);
        }
        run.report
            .per_agent_results
            .entry(sender)
            .or_default()
            .extend(report.results.iter().cloned());
        if let Some(cov) = &report.coverage {
            run.report.coverage.insert(sender, cov.clone());
        }
        // a reporting MUA has terminated
        self.pool.release(sender);
        self.progress(run_id, ctx);
    }

    fn on_notice(&mut self, env: &Envelope, report: &DefectReport, ctx: &mut Ctx<'_>) {
        let run_id = env
            .header
            .correlation_id
            .and_then(|c| self.correlations.get(&c))
            .filter(|(_, p)| *p == Purpose::Exec)
            .map(|(r, _)| r.clone());
        match run_id {
            Some(run_id) => {
                if let Some(run) = self.runs.get_mut(&run_id) {
                    run.notices.push(report.clone());
                }
                self.forward(&run_id, report.clone(), ctx);
            }
            None => {
                let id = ctx.send(AgentId::DRA, MessageBody::TestCaseForward { report: report.clone() });
                self.monitor_forwards.insert(id, (env.header.sender, report.clone()));
            }
        }
    }

    fn on_ack(&mut self, corr: MessageId, summary: Option<&RepositorySummary>, ctx: &mut Ctx<'_>) {
        if let Some((from, defect)) = self.monitor_forwards.remove(&corr) {
            self.monitor_seq += 1;
            let mut report = FinalReport::new(format!("monitor-{:03}", self.monitor_seq), None, defect.timestamp);
            report.finished = ctx.now();
            let case_id = defect.provoking_case.id.clone();
            report
                .per_agent_results
                .insert(from, vec![TestResult::fail(case_id, None, defect)]);
            report.collect_defects();
            report.repository = summary.cloned();
            ctx.send(self.cfg.tester, MessageBody::AggregateReport { report });
            return;
        }
        let Some((run_id, Purpose::Forward)) = self.correlations.remove(&corr) else {
            return;
        };
        let Some(run) = self.runs.get_mut(&run_id) else {
            return;
        };
        run.acks = run.acks.saturating_sub(1);
        if let Some(summary) = summary {
            let merged = run.report.repository.get_or_insert_with(RepositorySummary::default);
            merged.stored_cases = summary.stored_cases;
            merged.expected_outputs = summary.expected_outputs;
            merged.ingested.extend(summary.ingested.iter().cloned());
        }
        self.progress(&run_id, ctx);
    }
}

fn attribute(defect: &DefectReport, checks: &Checks) -> Option<Attribution> {
    let key = defect.dedup_key().ok()?;
    let case = &defect.provoking_case.id;
    let data_failed = checks.data.as_ref().and_then(|d| d.get(case)) == Some(&Verdict::Fail);
    let (tier, evidence) = if data_failed {
        (
            Some(Tier::Server),
            "served data differs from the repository's expected output",
        )
    } else if checks.middleware.get(case) == Some(&Verdict::Fail) {
        (Some(Tier::Middleware), "reproduced by middleware unit test")
    } else {
        let tier = match defect.context.get("tier").and_then(Value::as_str) {
            Some("client") => Some(Tier::Client),
            Some("middleware") => Some(Tier::Middleware),
            Some("server") => Some(Tier::Server),
            _ => None,
        };
        (tier, "tier reported by the failing call")
    };
    Some(Attribution {
        key,
        tier,
        evidence: evidence.to_owned(),
    })
}

impl Agent for ControllerAgent {
    fn id(&self) -> AgentId {
        AgentId::MCA
    }

    fn handle(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        let purpose = env
            .header
            .correlation_id
            .and_then(|c| self.correlations.get(&c).cloned());
        match (&env.body, purpose) {
            (MessageBody::TestRequest(req), _) => self.start_run(&env, req, ctx),
            (MessageBody::SuiteResponse { suite }, Some((run_id, Purpose::Suite))) => {
                self.on_suite(&run_id, suite.clone(), ctx);
            }
            (MessageBody::Rejected { reason }, Some((run_id, Purpose::Suite))) => {
                self.reject(&run_id, reason.clone(), ctx);
            }
            (MessageBody::Rejected { .. }, Some((_, Purpose::Forward))) => {
                self.on_ack(env.header.correlation_id.expect("matched above"), None, ctx);
            }
            (MessageBody::StatusReply { busy }, Some((run_id, Purpose::Status(agent)))) => {
                let Some(run) = self.runs.get_mut(&run_id) else {
                    return;
                };
                if run.phase != Phase::Status {
                    return;
                }
                run.status.insert(agent, Some(*busy));
                if run.status.values().all(Option::is_some) {
                    self.dispatch_regression(&run_id, ctx);
                    self.progress(&run_id, ctx);
                }
            }
            (MessageBody::ResultReport(report), Some((run_id, Purpose::Exec))) => {
                self.on_result(&run_id, &env, report, ctx);
            }
            (MessageBody::ResultReport(report), Some((run_id, Purpose::DataCheck))) => {
                if let Some(checks) = self.runs.get_mut(&run_id).and_then(|r| r.checks.as_mut()) {
                    checks.data = Some(report.results.iter().map(|r| (r.case_id.clone(), r.verdict)).collect());
                }
                self.progress(&run_id, ctx);
            }
            (MessageBody::DefectNotice { report }, _) => self.on_notice(&env, report, ctx),
            (MessageBody::AggregateReport { report }, _) if env.header.sender == AgentId::DRA => {
                if let Some(corr) = env.header.correlation_id {
                    self.on_ack(corr, report.repository.as_ref(), ctx);
                }
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        let Some((run_id, kind)) = self.timers.remove(&token) else {
            return;
        };
        match kind {
            TimerKind::Deadline => self.on_deadline(&run_id, ctx),
            TimerKind::Status => {
                self.dispatch_regression(&run_id, ctx);
                self.progress(&run_id, ctx);
            }
            TimerKind::Chunk(j) => {
                self.launch_chunk(&run_id, j, ctx);
                self.progress(&run_id, ctx);
            }
        }
    }

    fn on_undeliverable(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        let Some((run_id, purpose)) = self.correlations.get(&env.header.message_id).cloned() else {
            return;
        };
        let Some(run) = self.runs.get_mut(&run_id) else {
            return;
        };
        match purpose {
            Purpose::Exec => {
                if let Some(agent) = run.pending.remove(&env.header.message_id) {
                    run.report.partial = true;
                    run.report.missing_agents.insert(agent);
                    self.pool.release(agent);
                }
                self.progress(&run_id, ctx);
            }
            Purpose::Status(agent) => {
                if run.phase == Phase::Status {
                    run.status.insert(agent, Some(true));
                    if run.status.values().all(Option::is_some) {
                        self.dispatch_regression(&run_id, ctx);
                        self.progress(&run_id, ctx);
                    }
                }
            }
            Purpose::Suite => self.reject(&run_id, format!("repository unavailable ({})", env.kind()), ctx),
            Purpose::DataCheck => {
                if let Some(checks) = run.checks.as_mut() {
                    checks.data = Some(BTreeMap::new());
                }
                self.progress(&run_id, ctx);
            }
            Purpose::Forward => {
                run.acks = run.acks.saturating_sub(1);
                self.progress(&run_id, ctx);
            }
        }
    }
}
