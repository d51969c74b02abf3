//! Agent runtime: the actor interface plus two transports.
//!
//! Agents never touch a transport directly. A handler receives a [`Ctx`],
//! records sends, timers and spawns on it, and the hosting bus applies them
//! after the handler returns. The same agent code therefore runs on the
//! deterministic [`SimBus`] and on the threaded [`TcpHost`].

pub mod sim;
pub mod tcp;

use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, Tick};
use crate::protocol::{Envelope, Header, MessageBody, MessageId};

pub use sim::{LinkFaults, SimBus, SimConfig};
pub use tcp::{TcpConfig, TcpHost};

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("agent {0} is already registered")]
    DuplicateAgent(AgentId),
    #[error("operation needs the simulated bus")]
    ModeError,
    #[error("transport error: {0}")]
    Transport(String),
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
}

/// A sequential message handler.
pub trait Agent: Send {
    fn id(&self) -> AgentId;

    fn on_start(&mut self, _ctx: &mut Ctx<'_>) {}

    fn handle(&mut self, env: Envelope, ctx: &mut Ctx<'_>);

    fn on_timer(&mut self, _token: u64, _ctx: &mut Ctx<'_>) {}

    /// A message this agent sent could not be delivered.
    fn on_undeliverable(&mut self, _env: Envelope, _ctx: &mut Ctx<'_>) {}
}

pub(crate) enum Action {
    Send(Envelope),
    Timer { delay: Tick, token: u64, background: bool },
    CancelTimer(u64),
    Spawn(Box<dyn Agent>),
    Stop,
}

/// Handler-side view of the runtime.
pub struct Ctx<'a> {
    now: Tick,
    me: AgentId,
    next_id: &'a mut u64,
    pub(crate) actions: Vec<Action>,
}

impl<'a> Ctx<'a> {
    pub(crate) fn new(now: Tick, me: AgentId, next_id: &'a mut u64) -> Self {
        Ctx {
            now,
            me,
            next_id,
            actions: Vec::new(),
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn me(&self) -> AgentId {
        self.me
    }

    fn envelope(&mut self, to: AgentId, body: MessageBody, correlation: Option<MessageId>) -> Envelope {
        let id = MessageId(*self.next_id);
        *self.next_id += 1;
        Envelope {
            header: Header {
                message_id: id,
                sender: self.me,
                recipient: to,
                correlation_id: correlation,
                timestamp: self.now,
            },
            body,
        }
    }

    pub fn send(&mut self, to: AgentId, body: MessageBody) -> MessageId {
        self.send_correlated(to, body, None)
    }

    pub fn send_correlated(&mut self, to: AgentId, body: MessageBody, correlation: Option<MessageId>) -> MessageId {
        let env = self.envelope(to, body, correlation);
        let id = env.header.message_id;
        self.actions.push(Action::Send(env));
        id
    }

    /// Sends `body` back to the sender of `req`, correlated to it.
    pub fn reply(&mut self, req: &Envelope, body: MessageBody) -> MessageId {
        self.send_correlated(req.header.sender, body, Some(req.header.message_id))
    }

    /// Fires `on_timer(token)` after `delay` ticks (at least one).
    pub fn set_timer(&mut self, delay: Tick, token: u64) {
        self.actions.push(Action::Timer {
            delay: delay.max(1),
            token,
            background: false,
        });
    }

    /// Like [`Ctx::set_timer`], but the timer alone does not keep the
    /// simulated bus busy; used for periodic housekeeping.
    pub fn set_background_timer(&mut self, delay: Tick, token: u64) {
        self.actions.push(Action::Timer {
            delay: delay.max(1),
            token,
            background: true,
        });
    }

    /// Drops every pending timer of this agent carrying `token`.
    pub fn cancel_timer(&mut self, token: u64) {
        self.actions.push(Action::CancelTimer(token));
    }

    /// Registers a new agent on the same host.
    pub fn spawn(&mut self, agent: Box<dyn Agent>) {
        self.actions.push(Action::Spawn(agent));
    }

    /// Deregisters the calling agent once the handler returns.
    pub fn stop(&mut self) {
        self.actions.push(Action::Stop);
    }
}

/// One handled envelope, as captured in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub delivered_at: Tick,
    pub envelope: Envelope,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        let mut line = crate::protocol::canonical_text(self);
        line.push('\n');
        line
    }
}

/// Agent that just collects what it receives; the tester's mailbox.
pub struct Inbox {
    id: AgentId,
    received: std::sync::Arc<std::sync::Mutex<Vec<Envelope>>>,
}

/// Reader side of an [`Inbox`].
#[derive(Clone, Default)]
pub struct InboxHandle(std::sync::Arc<std::sync::Mutex<Vec<Envelope>>>);

impl Inbox {
    pub fn new(id: AgentId) -> (Inbox, InboxHandle) {
        let handle = InboxHandle::default();
        (
            Inbox {
                id,
                received: handle.0.clone(),
            },
            handle,
        )
    }
}

impl Agent for Inbox {
    fn id(&self) -> AgentId {
        self.id
    }

    fn handle(&mut self, env: Envelope, _ctx: &mut Ctx<'_>) {
        self.received.lock().expect("inbox lock").push(env);
    }
}

impl InboxHandle {
    /// Drains everything received so far.
    pub fn take(&self) -> Vec<Envelope> {
        std::mem::take(&mut *self.0.lock().expect("inbox lock"))
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("inbox lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
