//! Parallel test procedure: partition a suite into streams, run the streams
//! concurrently, and fold their results into one report.

use std::collections::BTreeMap;
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::agents::exec::Executor;
use crate::domain::{AgentId, TestCase, TestResult, TestSuite, TestingType, Tick};
use crate::protocol::FinalReport;
use crate::sut::{Scope, Sut};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParallelError {
    #[error("cannot partition a suite over zero executors")]
    NoExecutors,
    #[error("executor {0} is not available")]
    UnknownExecutor(AgentId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub executor: AgentId,
    pub cases: Vec<TestCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub run_id: String,
    pub streams: Vec<Stream>,
}

impl StreamPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.streams.iter().map(|s| s.cases.len()).collect()
    }
}

/// Case `i` goes to executor `i mod k`. Every executor gets a stream, even
/// an empty one.
pub fn partition(
    run_id: impl Into<String>,
    suite: &TestSuite,
    executors: &[AgentId],
) -> Result<StreamPlan, ParallelError> {
    if executors.is_empty() {
        return Err(ParallelError::NoExecutors);
    }
    let mut streams: Vec<Stream> = executors
        .iter()
        .map(|&executor| Stream {
            executor,
            cases: Vec::new(),
        })
        .collect();
    let k = streams.len();
    for (i, case) in suite.cases.iter().enumerate() {
        streams[i % k].cases.push(case.clone());
    }
    Ok(StreamPlan {
        run_id: run_id.into(),
        streams,
    })
}

/// Something that can run a stream of cases to completion.
pub trait StreamExecutor: Send + Sync {
    fn execute(&self, cases: &[TestCase]) -> Vec<TestResult>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamResult {
    pub executor: AgentId,
    pub results: Vec<TestResult>,
    /// The executor missed the deadline; `results` is empty.
    pub partial: bool,
}

/// Starts every stream on its own thread, then waits for all of them until
/// `deadline` has elapsed. Late streams come back flagged partial, in plan
/// order with the rest.
pub fn launch_and_await(
    plan: &StreamPlan,
    executors: &BTreeMap<AgentId, Arc<dyn StreamExecutor>>,
    deadline: Duration,
) -> Result<Vec<StreamResult>, ParallelError> {
    for s in &plan.streams {
        if !executors.contains_key(&s.executor) {
            return Err(ParallelError::UnknownExecutor(s.executor));
        }
    }
    let (tx, rx) = mpsc::channel();
    for (i, stream) in plan.streams.iter().enumerate() {
        let exec = Arc::clone(&executors[&stream.executor]);
        let cases = stream.cases.clone();
        let tx = tx.clone();
        std::thread::spawn(move || {
            let _ = tx.send((i, exec.execute(&cases)));
        });
    }
    drop(tx);

    let mut done: BTreeMap<usize, Vec<TestResult>> = BTreeMap::new();
    let until = Instant::now() + deadline;
    while done.len() < plan.streams.len() {
        let left = until.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok((i, results)) => {
                done.insert(i, results);
            }
            Err(_) => break,
        }
    }
    Ok(plan
        .streams
        .iter()
        .enumerate()
        .map(|(i, s)| match done.remove(&i) {
            Some(results) => StreamResult {
                executor: s.executor,
                results,
                partial: false,
            },
            None => StreamResult {
                executor: s.executor,
                results: Vec::new(),
                partial: true,
            },
        })
        .collect())
}

/// Builds the run report: per-agent results, deduplicated defects, timing,
/// and the partial flag with the executors that missed the deadline.
pub fn finalize(
    run_id: &str,
    testing_type: TestingType,
    started: Tick,
    finished: Tick,
    results: Vec<StreamResult>,
) -> FinalReport {
    let mut report = FinalReport::new(run_id, Some(testing_type), started);
    report.finished = finished;
    for r in results {
        if r.partial {
            report.partial = true;
            report.missing_agents.insert(r.executor);
        }
        report
            .per_agent_results
            .entry(r.executor)
            .or_default()
            .extend(r.results);
    }
    report.collect_defects();
    report
}

/// Runs streams directly against a simulated system, end to end.
pub struct SutStreamExecutor {
    pub sut: Arc<Sut>,
    pub id: AgentId,
    pub client: Option<String>,
}

impl StreamExecutor for SutStreamExecutor {
    fn execute(&self, cases: &[TestCase]) -> Vec<TestResult> {
        let mut exec = Executor::new(&self.sut, self.id).scope(Scope::EndToEnd);
        if let Some(c) = &self.client {
            exec = exec.at_client(c);
        }
        exec.run(cases, 0).results
    }
}
