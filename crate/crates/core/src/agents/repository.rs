//! Data repository agent: the test-suite database, expected outputs derived
//! from the model, staleness filtering and server-side data checks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::bus::{Agent, Ctx};
use crate::domain::{
    canonical_fields, dedup_key, AgentId, DedupKey, DefectReport, DomainError, ExpectedOutput, Fields, TestCase,
    TestResult, TestSuite, TestingType, Value,
};
use crate::protocol::{
    Envelope, FinalReport, IngestOutcome, IngestRecord, MessageBody, RepositorySummary, ResultReport,
};
use crate::sut::{ModelError, Sut, SutError, SutModel};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RepositoryError {
    #[error("no {0} suite is configured and no stored case matches")]
    NoSuiteConfigured(TestingType),
    #[error("bad constraint `{0}`")]
    BadConstraint(String),
}

/// (operation name, canonical input) → expected output.
pub type ExpectedOutputs = BTreeMap<(String, String), ExpectedOutput>;

/// Expected output for every declared example, evaluated with faults off.
pub fn generate_expected_outputs(model: &SutModel) -> Result<ExpectedOutputs, ModelError> {
    let mut out = BTreeMap::new();
    for (op, input) in model.declared_examples() {
        let value = model.evaluate(&op.name, input).map_err(|e| match e {
            SutError::Behavior { op, source } => ModelError::Behavior {
                op,
                input: canonical_fields(input),
                source,
            },
            other => ModelError::Invalid(other.to_string()),
        })?;
        out.insert(
            (op.name.clone(), canonical_fields(input)),
            ExpectedOutput {
                operation_name: op.name.clone(),
                for_input: input.clone(),
                value,
            },
        );
    }
    Ok(out)
}

/// The repository's database. Discovered cases are keyed by dedup key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "StoreFile", try_from = "StoreFile")]
pub struct SuiteStore {
    entries: BTreeMap<DedupKey, TestCase>,
    initial_suites: BTreeMap<TestingType, TestSuite>,
    expected_outputs: ExpectedOutputs,
}

/// On-disk layout of a store snapshot.
#[derive(Serialize, Deserialize)]
struct StoreFile {
    discovered: Vec<TestCase>,
    initial_suites: BTreeMap<TestingType, TestSuite>,
    expected_outputs: Vec<ExpectedOutput>,
}

impl From<SuiteStore> for StoreFile {
    fn from(s: SuiteStore) -> Self {
        StoreFile {
            discovered: s.entries.into_values().collect(),
            initial_suites: s.initial_suites,
            expected_outputs: s.expected_outputs.into_values().collect(),
        }
    }
}

impl TryFrom<StoreFile> for SuiteStore {
    type Error = DomainError;

    fn try_from(f: StoreFile) -> Result<Self, DomainError> {
        let mut entries = BTreeMap::new();
        for case in f.discovered {
            entries.insert(dedup_key(&case)?, case);
        }
        let expected_outputs = f
            .expected_outputs
            .into_iter()
            .map(|e| ((e.operation_name.clone(), canonical_fields(&e.for_input)), e))
            .collect();
        Ok(SuiteStore {
            entries,
            initial_suites: f.initial_suites,
            expected_outputs,
        })
    }
}

impl SuiteStore {
    /// Initial suites derived statically from the model, plus its expected outputs.
    pub fn from_model(model: &SutModel) -> Result<Self, ModelError> {
        let mut initial_suites = BTreeMap::new();
        for ty in TestingType::ALL {
            let cases = model.initial_suite(ty);
            if cases.is_empty() {
                continue;
            }
            let suite = TestSuite::new(format!("{}-initial", ty.label()), ty, cases)
                .map_err(|e| ModelError::Invalid(format!("{ty} suite: {e}")))?;
            initial_suites.insert(ty, suite);
        }
        Ok(SuiteStore {
            entries: BTreeMap::new(),
            initial_suites,
            expected_outputs: generate_expected_outputs(model)?,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn discovered(&self) -> impl Iterator<Item = (&DedupKey, &TestCase)> {
        self.entries.iter()
    }

    pub fn expected_outputs(&self) -> &ExpectedOutputs {
        &self.expected_outputs
    }

    pub fn initial_suite(&self, ty: TestingType) -> Option<&TestSuite> {
        self.initial_suites.get(&ty)
    }

    pub fn set_initial_suite(&mut self, suite: TestSuite) {
        self.initial_suites.insert(suite.testing_type, suite);
    }

    /// Stores the provoking case unless one with the same key is present.
    pub fn ingest_forwarded_case(&mut self, report: &DefectReport) -> Result<IngestOutcome, DomainError> {
        let key = dedup_key(report)?;
        if self.entries.contains_key(&key) {
            return Ok(IngestOutcome::Discarded);
        }
        let mut case = report.provoking_case.clone();
        case.defect_type = Some(report.defect_type.clone());
        self.entries.insert(key, case);
        Ok(IngestOutcome::Stored)
    }

    /// Initial suite for the type, extended with stored cases whose operation
    /// is named in `constraints.operations`. Stress suites are repeated
    /// `constraints.volume` times with an `iteration` input field.
    pub fn select_suite(&self, ty: TestingType, constraints: &Fields) -> Result<TestSuite, RepositoryError> {
        let mut cases: Vec<TestCase> = self
            .initial_suites
            .get(&ty)
            .map(|s| s.cases.clone())
            .unwrap_or_default();
        if let Some(ops) = constraints.get("operations") {
            let Value::List(ops) = ops else {
                return Err(RepositoryError::BadConstraint("operations".into()));
            };
            let wanted: BTreeSet<&str> = ops.iter().filter_map(Value::as_str).collect();
            let mut ids: BTreeSet<String> = cases.iter().map(|c| c.id.clone()).collect();
            for case in self.entries.values() {
                if wanted.contains(case.operation_name.as_str()) {
                    let mut case = case.clone();
                    while !ids.insert(case.id.clone()) {
                        case.id.push('\'');
                    }
                    cases.push(case);
                }
            }
        }
        if cases.is_empty() && !self.initial_suites.contains_key(&ty) {
            return Err(RepositoryError::NoSuiteConfigured(ty));
        }
        if ty == TestingType::Stress {
            let volume = match constraints.get("volume") {
                None => 1,
                Some(v) => v
                    .as_i64()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| RepositoryError::BadConstraint("volume".into()))?,
            };
            cases = expand(&cases, volume as u64);
        }
        for case in &mut cases {
            if case.expected_output.is_none() {
                case.expected_output = self
                    .expected_outputs
                    .get(&(case.operation_name.clone(), canonical_fields(&case.input)))
                    .cloned();
            }
        }
        Ok(TestSuite::new(format!("{}-suite", ty.label()), ty, cases).expect("case ids made unique above"))
    }

    /// Removes stored cases whose operation the model no longer declares,
    /// and forgets that operation's expected outputs and initial cases.
    /// Returns removed case ids in key order.
    pub fn filter_stale(&mut self, model: &SutModel) -> Vec<String> {
        let declared = |op: &str| model.operation(op).is_some();
        let stale: Vec<DedupKey> = self
            .entries
            .iter()
            .filter(|(_, c)| !declared(&c.operation_name))
            .map(|(k, _)| k.clone())
            .collect();
        let removed = stale
            .iter()
            .filter_map(|k| self.entries.remove(k))
            .map(|c| c.id)
            .collect();
        self.expected_outputs.retain(|(op, _), _| declared(op));
        for suite in self.initial_suites.values_mut() {
            suite.cases.retain(|c| declared(&c.operation_name));
        }
        removed
    }

    pub fn summary(&self) -> RepositorySummary {
        RepositorySummary {
            stored_cases: self.entries.len() as u64,
            expected_outputs: self.expected_outputs.len() as u64,
            ingested: Vec::new(),
            removed: Vec::new(),
        }
    }

    pub fn snapshot(&self) -> Vec<u8> {
        crate::protocol::to_canonical(self).expect("store serializes")
    }

    pub fn load(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

/// Repeats `base` `volume` times; repetition r gets id `{id}#{r}` and input
/// field `iteration = r + 1`.
fn expand(base: &[TestCase], volume: u64) -> Vec<TestCase> {
    let mut out = Vec::with_capacity(base.len() * volume as usize);
    for r in 0..volume {
        for case in base {
            let mut c = case.clone();
            c.id = format!("{}#{r}", case.id);
            c.input.insert("iteration".into(), Value::Int(r as i64 + 1));
            c.expected_output = None;
            out.push(c);
        }
    }
    out
}

/// Shared view of the store for the driver (snapshots, assertions). The
/// agent holds the lock only while handling a message.
pub type StoreHandle = Arc<Mutex<SuiteStore>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepositoryConfig {
    pub tester: AgentId,
    /// Ticks between staleness sweeps; 0 disables them.
    pub filter_interval: crate::domain::Tick,
}

impl Default for RepositoryConfig {
    fn default() -> Self {
        RepositoryConfig {
            tester: AgentId::TESTER,
            filter_interval: 500,
        }
    }
}

const FILTER: u64 = 0;

pub struct RepositoryAgent {
    store: StoreHandle,
    sut: Arc<Sut>,
    cfg: RepositoryConfig,
    snapshot_path: Option<PathBuf>,
    summaries: u64,
}

impl RepositoryAgent {
    pub fn new(store: StoreHandle, sut: Arc<Sut>, cfg: RepositoryConfig) -> Self {
        RepositoryAgent {
            store,
            sut,
            cfg,
            snapshot_path: None,
            summaries: 0,
        }
    }

    /// Writes a snapshot here whenever the tester asks for a summary.
    pub fn with_snapshot_path(mut self, path: PathBuf) -> Self {
        self.snapshot_path = Some(path);
        self
    }

    fn summary_report(&mut self, summary: RepositorySummary, now: crate::domain::Tick) -> FinalReport {
        self.summaries += 1;
        let mut report = FinalReport::new(format!("dra-{:03}", self.summaries), None, now);
        report.repository = Some(summary);
        report
    }

    /// Server-side data check for each case: served data vs design data.
    fn check_data(&self, suite: &TestSuite, now: crate::domain::Tick) -> ResultReport {
        let results = suite
            .cases
            .iter()
            .map(|case| match self.sut.check_data(&case.operation_name, &case.input) {
                Ok(check) if check.consistent => TestResult::pass(&case.id, check.observed),
                Ok(check) => {
                    let mut context = Fields::new();
                    if let Some(v) = check.expected {
                        context.insert("expected".into(), v);
                    }
                    if let Some(v) = check.observed.clone() {
                        context.insert("observed".into(), v);
                    }
                    let mut provoking = case.clone();
                    provoking.defect_type = Some("inconsistent_data".into());
                    TestResult::fail(
                        &case.id,
                        check.observed,
                        DefectReport {
                            operation_name: case.operation_name.clone(),
                            defect_type: "inconsistent_data".into(),
                            provoking_case: provoking,
                            discovered_by: AgentId::DRA,
                            context,
                            timestamp: now,
                        },
                    )
                }
                Err(e) => TestResult::error(&case.id, e.to_string()),
            })
            .collect();
        ResultReport {
            results,
            coverage: None,
            partial: false,
        }
    }
}

impl Agent for RepositoryAgent {
    fn id(&self) -> AgentId {
        AgentId::DRA
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        if self.cfg.filter_interval > 0 {
            ctx.set_background_timer(self.cfg.filter_interval, FILTER);
        }
    }

    fn handle(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        match &env.body {
            MessageBody::TestCaseForward { report } => {
                let outcome = self.store.lock().expect("store lock").ingest_forwarded_case(report);
                match outcome {
                    Ok(outcome) => {
                        let mut summary = self.store.lock().expect("store lock").summary();
                        summary.ingested.push(IngestRecord {
                            key: dedup_key(report).expect("ingest checked the key"),
                            outcome,
                        });
                        let report = self.summary_report(summary, ctx.now());
                        ctx.reply(&env, MessageBody::AggregateReport { report });
                    }
                    Err(e) => {
                        ctx.reply(&env, MessageBody::Rejected { reason: e.to_string() });
                    }
                }
            }
            MessageBody::SuiteRequest {
                testing_type,
                constraints,
            } => {
                let selected = self
                    .store
                    .lock()
                    .expect("store lock")
                    .select_suite(*testing_type, constraints);
                match selected {
                    Ok(mut suite) => {
                        let model = self.sut.model();
                        let mut store = self.store.lock().expect("store lock");
                        for case in &mut suite.cases {
                            if case.expected_output.is_some() {
                                continue;
                            }
                            // derived on demand, e.g. for expanded stress inputs
                            if let Ok(value) = model.evaluate(&case.operation_name, &case.input) {
                                let expected = ExpectedOutput {
                                    operation_name: case.operation_name.clone(),
                                    for_input: case.input.clone(),
                                    value,
                                };
                                if model
                                    .declared_examples()
                                    .any(|(op, ex)| op.name == case.operation_name && *ex == case.input)
                                {
                                    store.expected_outputs.insert(
                                        (case.operation_name.clone(), canonical_fields(&case.input)),
                                        expected.clone(),
                                    );
                                }
                                case.expected_output = Some(expected);
                            }
                        }
                        drop(store);
                        ctx.reply(&env, MessageBody::SuiteResponse { suite });
                    }
                    Err(e) => {
                        ctx.reply(&env, MessageBody::Rejected { reason: e.to_string() });
                    }
                }
            }
            MessageBody::TestRequest(req) => {
                let report = self.check_data(&req.suite, ctx.now());
                ctx.reply(&env, MessageBody::ResultReport(report));
            }
            MessageBody::StatusQuery {} => {
                let model = self.sut.model();
                let mut store = self.store.lock().expect("store lock");
                let removed = store.filter_stale(&model);
                let mut summary = store.summary();
                summary.removed = removed;
                if let Some(path) = &self.snapshot_path {
                    let _ = std::fs::write(path, store.snapshot());
                }
                drop(store);
                let report = self.summary_report(summary, ctx.now());
                ctx.reply(&env, MessageBody::AggregateReport { report });
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        if token != FILTER {
            return;
        }
        let model = self.sut.model();
        let mut store = self.store.lock().expect("store lock");
        let removed = store.filter_stale(&model);
        let mut summary = store.summary();
        drop(store);
        if !removed.is_empty() {
            summary.removed = removed;
            let report = self.summary_report(summary, ctx.now());
            ctx.send(self.cfg.tester, MessageBody::AggregateReport { report });
        }
        ctx.set_background_timer(self.cfg.filter_interval, FILTER);
    }
}
