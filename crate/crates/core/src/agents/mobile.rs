//! Mobile urgent agent: stands in for a busy client checker, runs one task at
//! that client's site, reports, and terminates.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::client::execute_request;
use super::exec::distinct_defects;
use crate::bus::{Agent, Ctx};
use crate::coverage::Criterion;
use crate::domain::{AgentId, Origin, Tick};
use crate::protocol::{Envelope, MessageBody, MessageId, ResultReport, TestRequest};
use crate::sut::Sut;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MuaError {
    #[error("MUA pool exhausted ({0} in use)")]
    PoolExhausted(usize),
    #[error("unknown client `{0}`")]
    UnknownClient(String),
    #[error("task {task} cannot move from {from:?} to {to:?}")]
    InvalidTransition { task: String, from: MuaState, to: MuaState },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MuaState {
    Dispatched,
    Running,
    Reported,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuaTask {
    pub task_id: String,
    pub target_client: String,
    pub request: TestRequest,
    pub dispatched_at: Tick,
    /// Ticks the task may take from dispatch.
    pub deadline: Tick,
    pub state: MuaState,
}

impl MuaTask {
    pub fn transition(&mut self, to: MuaState) -> Result<(), MuaError> {
        use MuaState::*;
        let ok = matches!(
            (self.state, to),
            (Dispatched, Running) | (Running, Reported) | (Dispatched | Running, Expired)
        );
        if !ok {
            return Err(MuaError::InvalidTransition {
                task: self.task_id.clone(),
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state, MuaState::Reported | MuaState::Expired)
    }
}

/// Bounded set of live MUAs, kept by the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct MuaPool {
    capacity: usize,
    clients: BTreeSet<String>,
    active: BTreeMap<AgentId, MuaTask>,
    next_instance: u32,
}

impl MuaPool {
    pub fn new(capacity: usize, clients: impl IntoIterator<Item = String>) -> Self {
        MuaPool {
            capacity,
            clients: clients.into_iter().collect(),
            active: BTreeMap::new(),
            next_instance: 1,
        }
    }

    pub fn available(&self) -> usize {
        self.capacity.saturating_sub(self.active.len())
    }

    pub fn active(&self) -> impl Iterator<Item = (&AgentId, &MuaTask)> {
        self.active.iter()
    }

    /// Reserves a fresh MUA identity for a task at `target_client`.
    pub fn dispatch(
        &mut self,
        target_client: &str,
        request: TestRequest,
        now: Tick,
        deadline: Tick,
    ) -> Result<(AgentId, MuaTask), MuaError> {
        if !self.clients.contains(target_client) {
            return Err(MuaError::UnknownClient(target_client.to_owned()));
        }
        if self.active.len() >= self.capacity {
            return Err(MuaError::PoolExhausted(self.active.len()));
        }
        let id = AgentId::mua(self.next_instance);
        self.next_instance += 1;
        let task = MuaTask {
            task_id: format!("{id}@{target_client}"),
            target_client: target_client.to_owned(),
            request,
            dispatched_at: now,
            deadline,
            state: MuaState::Dispatched,
        };
        self.active.insert(id, task.clone());
        Ok((id, task))
    }

    /// Forgets a MUA once it has reported or expired.
    pub fn release(&mut self, id: AgentId) -> Option<MuaTask> {
        self.active.remove(&id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MobileConfig {
    pub criterion: Criterion,
    pub case_cost: Tick,
}

impl Default for MobileConfig {
    fn default() -> Self {
        MobileConfig {
            criterion: Criterion::NodeCoverage,
            case_cost: 1,
        }
    }
}

pub struct MobileAgent {
    id: AgentId,
    task: MuaTask,
    sut: Arc<Sut>,
    cfg: MobileConfig,
    pending: Option<(AgentId, MessageId, ResultReport)>,
}

const REPORT: u64 = 1;

impl MobileAgent {
    pub fn new(id: AgentId, task: MuaTask, sut: Arc<Sut>, cfg: MobileConfig) -> Self {
        MobileAgent {
            id,
            task,
            sut,
            cfg,
            pending: None,
        }
    }

    pub fn task(&self) -> &MuaTask {
        &self.task
    }

    /// Runs the embedded request and returns the report along with the tick
    /// at which it can be sent. Cases that would finish after the task's
    /// deadline are dropped and the report is flagged partial.
    pub fn execute_and_report(&mut self, now: Tick) -> (ResultReport, Tick) {
        let cutoff = self.task.dispatched_at.saturating_add(self.task.deadline);
        if self.task.deadline == 0 || now >= cutoff {
            let _ = self.task.transition(MuaState::Expired);
            return (
                ResultReport {
                    results: Vec::new(),
                    coverage: None,
                    partial: true,
                },
                now,
            );
        }
        let _ = self.task.transition(MuaState::Running);
        let (mut report, completed) = execute_request(
            &self.sut,
            self.id,
            &self.task.target_client,
            Origin::DiscoveredByMUA,
            &self.task.request,
            self.cfg.criterion,
            now,
            self.cfg.case_cost,
        );
        let in_time = completed.iter().take_while(|&&t| t <= cutoff).count();
        if in_time < report.results.len() {
            report.results.truncate(in_time);
            report.partial = true;
            return (report, cutoff);
        }
        let done = completed.last().copied().unwrap_or(now);
        (report, done)
    }

    fn send_report(&mut self, to: AgentId, correlation: MessageId, report: ResultReport, ctx: &mut Ctx<'_>) {
        for defect in distinct_defects(&report.results) {
            ctx.send_correlated(to, MessageBody::DefectNotice { report: defect }, Some(correlation));
        }
        ctx.send_correlated(to, MessageBody::ResultReport(report), Some(correlation));
        if self.task.state == MuaState::Running {
            let _ = self.task.transition(MuaState::Reported);
        }
        ctx.stop();
    }
}

impl Agent for MobileAgent {
    fn id(&self) -> AgentId {
        self.id
    }

    fn handle(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        let MessageBody::DispatchAgent { task, .. } = &env.body else {
            return;
        };
        if self.task.state != MuaState::Dispatched {
            return;
        }
        self.task.request = task.clone();
        let (report, ready_at) = self.execute_and_report(ctx.now());
        let (to, corr) = (env.header.sender, env.header.message_id);
        if ready_at <= ctx.now() {
            self.send_report(to, corr, report, ctx);
        } else {
            self.pending = Some((to, corr, report));
            ctx.set_timer(ready_at - ctx.now(), REPORT);
        }
    }

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        if token != REPORT {
            return;
        }
        if let Some((to, corr, report)) = self.pending.take() {
            self.send_report(to, corr, report, ctx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{TestSuite, TestingType};

    fn request() -> TestRequest {
        TestRequest::new(TestSuite::empty("s", TestingType::Regression))
    }

    #[test]
    fn pool_dispatch_and_capacity() {
        let mut pool = MuaPool::new(2, ["c1".to_owned(), "c2".to_owned()]);
        let (a, task) = pool.dispatch("c1", request(), 0, 10).unwrap();
        assert_eq!(a, AgentId::mua(1));
        assert_eq!(task.state, MuaState::Dispatched);
        assert_eq!(
            pool.dispatch("c9", request(), 0, 10),
            Err(MuaError::UnknownClient("c9".into()))
        );
        pool.dispatch("c2", request(), 0, 10).unwrap();
        assert_eq!(pool.dispatch("c1", request(), 0, 10), Err(MuaError::PoolExhausted(2)));
        pool.release(a);
        assert_eq!(pool.dispatch("c1", request(), 0, 10).unwrap().0, AgentId::mua(3));
    }

    #[test]
    fn transitions_only_forward() {
        let mut t = MuaPool::new(1, ["c1".to_owned()])
            .dispatch("c1", request(), 0, 5)
            .unwrap()
            .1;
        assert!(t.transition(MuaState::Reported).is_err());
        t.transition(MuaState::Running).unwrap();
        t.transition(MuaState::Reported).unwrap();
        assert!(t.transition(MuaState::Running).is_err());
        assert!(t.transition(MuaState::Expired).is_err());
    }

    #[test]
    fn zero_deadline_expires_immediately() {
        let sut = Arc::new(Sut::new(crate::sut::fixtures::shop()));
        let task = MuaPool::new(1, ["c1".to_owned()])
            .dispatch("c1", request(), 0, 0)
            .unwrap()
            .1;
        let mut mua = MobileAgent::new(AgentId::mua(1), task, sut, MobileConfig::default());
        let (report, at) = mua.execute_and_report(0);
        assert!(report.partial && report.results.is_empty());
        assert_eq!(at, 0);
        assert_eq!(mua.task().state, MuaState::Expired);
    }
}
