//! The agents: repository (DRA), controller (MCA), client checkers (CCA) and
//! mobile urgent agents (MUA), plus a helper that wires them onto a
//! simulated bus.

pub mod client;
pub mod controller;
pub mod exec;
pub mod mobile;
pub mod repository;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::bus::{Agent, BusError, Inbox, InboxHandle, SimBus, SimConfig};
use crate::domain::{AgentId, Fields, TestSuite, TestingType};
use crate::protocol::{Envelope, MessageBody, MessageId, TestRequest};
use crate::sut::{ModelError, Sut, SutModel};

use client::{ClientAgent, ClientConfig, ControlHandle, LogSource};
use controller::{ControllerAgent, ControllerConfig};
use repository::{RepositoryAgent, RepositoryConfig, StoreHandle, SuiteStore};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeploymentConfig {
    pub sim: SimConfig,
    pub controller: ControllerConfig,
    pub client: ClientConfig,
    pub repository: RepositoryConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// Shared handles into an assembled set of agents.
pub struct Handles {
    pub sut: Arc<Sut>,
    pub store: StoreHandle,
    /// Client ids in model order with their checker agents.
    pub clients: Vec<(String, AgentId)>,
    pub controls: BTreeMap<String, ControlHandle>,
    pub logs: BTreeMap<String, LogSource>,
}

/// Builds the DRA, the MCA and one CCA per client (`CCA-1` for the first
/// client in model order), ready to register on any bus. Clients without a
/// log source in `logs` get an in-memory log.
pub fn assemble(
    model: SutModel,
    cfg: &DeploymentConfig,
    mut logs: BTreeMap<String, LogSource>,
) -> Result<(Handles, Vec<Box<dyn Agent>>), DeployError> {
    model.validate()?;
    let store = Arc::new(Mutex::new(SuiteStore::from_model(&model)?));
    let clients: Vec<(String, AgentId)> = model
        .client_ids()
        .into_iter()
        .zip(1..)
        .map(|(c, n)| (c, AgentId::cca(n)))
        .collect();
    let sut = Arc::new(Sut::new(model));
    let mut agents: Vec<Box<dyn Agent>> = vec![
        Box::new(RepositoryAgent::new(
            Arc::clone(&store),
            Arc::clone(&sut),
            cfg.repository,
        )),
        Box::new(ControllerAgent::new(Arc::clone(&sut), clients.clone(), cfg.controller)),
    ];
    let mut controls = BTreeMap::new();
    for (client, id) in &clients {
        let log = logs.entry(client.clone()).or_insert_with(LogSource::memory).clone();
        let control = ControlHandle::default();
        controls.insert(client.clone(), Arc::clone(&control));
        agents.push(Box::new(
            ClientAgent::new(*id, client, Arc::clone(&sut), log, cfg.client).with_control(control),
        ));
    }
    logs.retain(|c, _| controls.contains_key(c));
    let handles = Handles {
        sut,
        store,
        clients,
        controls,
        logs,
    };
    Ok((handles, agents))
}

/// All agents plus the tester's inbox on one simulated bus.
pub struct Deployment {
    pub bus: SimBus,
    pub sut: Arc<Sut>,
    pub store: StoreHandle,
    pub clients: Vec<(String, AgentId)>,
    pub controls: BTreeMap<String, ControlHandle>,
    pub logs: BTreeMap<String, LogSource>,
    tester: InboxHandle,
    received: Vec<Envelope>,
}

impl Deployment {
    pub fn start(
        model: SutModel,
        cfg: DeploymentConfig,
        logs: BTreeMap<String, LogSource>,
    ) -> Result<Self, DeployError> {
        let (h, agents) = assemble(model, &cfg, logs)?;
        let mut bus = SimBus::new(cfg.sim);
        let (inbox, tester) = Inbox::new(cfg.controller.tester);
        bus.register(Box::new(inbox))?;
        for agent in agents {
            bus.register(agent)?;
        }
        Ok(Deployment {
            bus,
            sut: h.sut,
            store: h.store,
            clients: h.clients,
            controls: h.controls,
            logs: h.logs,
            tester,
            received: Vec::new(),
        })
    }

    pub fn cca_of(&self, client: &str) -> Option<AgentId> {
        self.clients.iter().find(|(c, _)| c == client).map(|(_, a)| *a)
    }

    /// Sends a test request from the tester to the controller.
    pub fn request(&mut self, testing_type: TestingType, params: Fields) -> MessageId {
        self.bus.inject(
            AgentId::TESTER,
            AgentId::MCA,
            MessageBody::TestRequest(test_request(testing_type, params)),
        )
    }

    /// Everything the tester has received so far, in arrival order.
    pub fn tester_inbox(&mut self) -> &[Envelope] {
        self.received.extend(self.tester.take());
        &self.received
    }
}

/// A tester's request: the controller fetches the suite itself.
pub fn test_request(testing_type: TestingType, params: Fields) -> TestRequest {
    let mut req = TestRequest::new(TestSuite::empty(
        format!("{}-request", testing_type.label()),
        testing_type,
    ));
    req.params = params;
    req
}
