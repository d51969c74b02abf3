//! Case execution shared by every agent that runs tests.

use std::collections::BTreeMap;

use crate::coverage::ExecutionTrace;
use crate::domain::{verdict_of, AgentId, DefectReport, Fields, Origin, TestCase, TestResult, Tick, Value, Verdict};
use crate::sut::{Call, Scope, Sut, SutError};

/// Defect type for an end-to-end output that disagrees with the expected one.
pub const OUTPUT_MISMATCH: &str = "output_mismatch";

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub results: Vec<TestResult>,
    /// Walked paths per component name, in case order.
    pub traces: BTreeMap<String, Vec<ExecutionTrace>>,
    /// Tick at which each result became available, parallel to `results`.
    pub completed_at: Vec<Tick>,
}

impl Execution {
    pub fn failures(&self) -> impl Iterator<Item = &DefectReport> {
        self.results
            .iter()
            .filter(|r| r.verdict == Verdict::Fail)
            .filter_map(|r| r.defect.as_ref())
    }
}

/// Runs cases against the SUT on behalf of one agent.
#[derive(Debug, Clone, Copy)]
pub struct Executor<'a> {
    pub sut: &'a Sut,
    pub me: AgentId,
    /// Client whose site the executor sits on, if any.
    pub client: Option<&'a str>,
    pub scope: Scope,
    /// Origin stamped on provoking cases; `None` keeps the case's own.
    pub origin: Option<Origin>,
    /// Logical ticks one case takes.
    pub case_cost: Tick,
}

impl<'a> Executor<'a> {
    pub fn new(sut: &'a Sut, me: AgentId) -> Self {
        Executor {
            sut,
            me,
            client: None,
            scope: Scope::EndToEnd,
            origin: None,
            case_cost: 1,
        }
    }

    pub fn at_client(mut self, client: &'a str) -> Self {
        self.client = Some(client);
        self
    }

    pub fn scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn origin(mut self, origin: Origin) -> Self {
        self.origin = Some(origin);
        self
    }

    pub fn case_cost(mut self, cost: Tick) -> Self {
        self.case_cost = cost;
        self
    }

    /// Executes `cases` one after another starting at `start`.
    pub fn run(&self, cases: &[TestCase], start: Tick) -> Execution {
        let mut out = Execution {
            results: Vec::with_capacity(cases.len()),
            traces: BTreeMap::new(),
            completed_at: Vec::with_capacity(cases.len()),
        };
        for (i, case) in cases.iter().enumerate() {
            let at = start + i as Tick * self.case_cost;
            let result = self.run_case(case, at, &mut out.traces);
            out.results.push(result);
            out.completed_at.push(at + self.case_cost);
        }
        out
    }

    fn run_case(&self, case: &TestCase, at: Tick, traces: &mut BTreeMap<String, Vec<ExecutionTrace>>) -> TestResult {
        let model = self.sut.model();
        let Some(op) = model.operation(&case.operation_name) else {
            return TestResult::error(&case.id, format!("unknown operation `{}`", case.operation_name));
        };
        let mut call = Call::new(&case.operation_name, &case.input).scope(self.scope);
        if let Some(client) = self.client {
            if self.scope == Scope::ClientOnly && !op.hosted_on(client) {
                return TestResult::error(
                    &case.id,
                    format!("misrouted: `{}` is not hosted on client {client}", op.name),
                );
            }
            if op.hosted_on(client) {
                call = call.client(client);
            }
        }
        let inv = match self.sut.call(&call) {
            Ok(inv) => inv,
            Err(e @ SutError::Unreachable(_)) => return TestResult::error(&case.id, format!("sut unreachable: {e}")),
            Err(e) => return TestResult::error(&case.id, e.to_string()),
        };
        for t in inv.traces {
            let mut trace = t.trace;
            trace.case_id = case.id.clone();
            traces.entry(t.component).or_default().push(trace);
        }
        match inv.outcome {
            Err(fault) => TestResult::fail(&case.id, None, self.defect(case, &fault.defect_type, fault.context, at)),
            Ok(observed) => match &case.expected_output {
                Some(expected) if verdict_of(&observed, expected) == Verdict::Fail => {
                    let context: Fields = [
                        ("expected".to_owned(), expected.value.clone()),
                        ("observed".to_owned(), observed.clone()),
                    ]
                    .into();
                    TestResult::fail(
                        &case.id,
                        Some(observed),
                        self.defect(case, OUTPUT_MISMATCH, context, at),
                    )
                }
                _ => TestResult::pass(&case.id, Some(observed)),
            },
        }
    }

    fn defect(&self, case: &TestCase, defect_type: &str, context: Fields, at: Tick) -> DefectReport {
        let mut provoking = case.clone();
        provoking.defect_type = Some(defect_type.to_owned());
        if let Some(origin) = self.origin {
            provoking.origin = origin;
        }
        DefectReport {
            operation_name: case.operation_name.clone(),
            defect_type: defect_type.to_owned(),
            provoking_case: provoking,
            discovered_by: self.me,
            context,
            timestamp: at,
        }
    }
}

/// The first failure per dedup key, in result order.
pub fn distinct_defects(results: &[TestResult]) -> Vec<DefectReport> {
    crate::protocol::dedup_defects(
        results
            .iter()
            .filter(|r| r.verdict == Verdict::Fail)
            .filter_map(|r| r.defect.as_ref()),
    )
}

/// Field lookup helper for request parameters.
pub fn param_u64(params: &Fields, key: &str) -> Option<u64> {
    params
        .get(key)
        .and_then(Value::as_i64)
        .and_then(|v| u64::try_from(v).ok())
}
