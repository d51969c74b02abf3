//! Threaded TCP transport.
//!
//! A host runs a set of local agents on one event-loop thread. Frames are the
//! canonical envelope bytes behind a 4-byte big-endian length. Remote agents
//! are reached through the configured peer map; agents that are not in the
//! map (a tester attached from a CLI, say) are answered over the connection
//! their last message arrived on. One logical tick is one millisecond.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{Action, Agent, BusError, Ctx, TraceRecord};
use crate::domain::{AgentId, Tick};
use crate::protocol::{self, Envelope, MessageBody, MessageId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpConfig {
    pub listen: SocketAddr,
    pub peers: BTreeMap<AgentId, SocketAddr>,
    /// First message id this host hands out; hosts in one deployment should
    /// use disjoint ranges.
    pub id_base: u64,
}

impl TcpConfig {
    pub fn new(listen: SocketAddr) -> Self {
        TcpConfig {
            listen,
            peers: BTreeMap::new(),
            id_base: 1,
        }
    }

    pub fn peer(mut self, agent: AgentId, addr: SocketAddr) -> Self {
        self.peers.insert(agent, addr);
        self
    }

    pub fn id_base(mut self, base: u64) -> Self {
        self.id_base = base;
        self
    }
}

type Conn = Arc<Mutex<BufWriter<TcpStream>>>;

enum Command {
    Register(Box<dyn Agent>, Sender<Result<(), BusError>>),
    Inject(AgentId, AgentId, MessageBody, Sender<MessageId>),
    /// Inbound bytes and the connection they came on; `None` for local hops.
    Frame(Vec<u8>, Option<Conn>),
    Shutdown,
}

/// Handle to a running host. Dropping it stops the event loop.
pub struct TcpHost {
    local_addr: SocketAddr,
    commands: Sender<Command>,
    stop: Arc<AtomicBool>,
    trace: Arc<Mutex<Vec<TraceRecord>>>,
    errors: Arc<Mutex<Vec<String>>>,
    event_loop: Option<JoinHandle<()>>,
}

impl TcpHost {
    pub fn start(cfg: TcpConfig) -> Result<TcpHost, BusError> {
        let listener = TcpListener::bind(cfg.listen).map_err(|e| BusError::Transport(e.to_string()))?;
        let local_addr = listener.local_addr().map_err(|e| BusError::Transport(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let trace = Arc::new(Mutex::new(Vec::new()));
        let errors = Arc::new(Mutex::new(Vec::new()));

        {
            let tx = tx.clone();
            let stop = stop.clone();
            thread::spawn(move || accept_loop(listener, tx, stop));
        }
        let mut state = LoopState {
            started: Instant::now(),
            next_id: cfg.id_base,
            agents: BTreeMap::new(),
            peers: cfg.peers,
            outbound: BTreeMap::new(),
            learned: BTreeMap::new(),
            seen: BTreeMap::new(),
            timers: BinaryHeap::new(),
            timer_seq: 0,
            commands: tx.clone(),
            trace: trace.clone(),
            errors: errors.clone(),
        };
        let event_loop = thread::spawn(move || state.run(rx));
        Ok(TcpHost {
            local_addr,
            commands: tx,
            stop,
            trace,
            errors,
            event_loop: Some(event_loop),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn register(&self, agent: Box<dyn Agent>) -> Result<(), BusError> {
        let (tx, rx) = mpsc::channel();
        self.commands
            .send(Command::Register(agent, tx))
            .map_err(|_| BusError::Transport("host stopped".into()))?;
        rx.recv().map_err(|_| BusError::Transport("host stopped".into()))?
    }

    pub fn inject(&self, from: AgentId, to: AgentId, body: MessageBody) -> Result<MessageId, BusError> {
        let (tx, rx) = mpsc::channel();
        self.commands
            .send(Command::Inject(from, to, body, tx))
            .map_err(|_| BusError::Transport("host stopped".into()))?;
        rx.recv().map_err(|_| BusError::Transport("host stopped".into()))
    }

    /// Logical time only moves with the wall clock here.
    pub fn advance(&self, _ticks: Tick) -> Result<(), BusError> {
        Err(BusError::ModeError)
    }

    pub fn trace(&self) -> Vec<TraceRecord> {
        self.trace.lock().expect("trace lock").clone()
    }

    pub fn errors(&self) -> Vec<String> {
        self.errors.lock().expect("error lock").clone()
    }

    pub fn shutdown(mut self) {
        self.stop_loop();
    }

    fn stop_loop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.commands.send(Command::Shutdown);
        // wake the accept loop so it notices the flag
        let _ = TcpStream::connect(self.local_addr);
        if let Some(handle) = self.event_loop.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for TcpHost {
    fn drop(&mut self) {
        self.stop_loop();
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Command>, stop: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        spawn_reader(stream, tx.clone());
    }
}

fn spawn_reader(stream: TcpStream, tx: Sender<Command>) {
    let _ = stream.set_nodelay(true);
    let Ok(write_half) = stream.try_clone() else { return };
    let conn: Conn = Arc::new(Mutex::new(BufWriter::new(write_half)));
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        while let Ok(Some(frame)) = protocol::read_frame(&mut reader) {
            if tx.send(Command::Frame(frame, Some(conn.clone()))).is_err() {
                break;
            }
        }
    });
}

struct LoopState {
    started: Instant,
    next_id: u64,
    agents: BTreeMap<AgentId, Box<dyn Agent>>,
    peers: BTreeMap<AgentId, SocketAddr>,
    outbound: BTreeMap<SocketAddr, Conn>,
    learned: BTreeMap<AgentId, Conn>,
    seen: BTreeMap<AgentId, BTreeSet<MessageId>>,
    timers: BinaryHeap<Reverse<(Instant, u64, AgentId, u64)>>,
    timer_seq: u64,
    commands: Sender<Command>,
    trace: Arc<Mutex<Vec<TraceRecord>>>,
    errors: Arc<Mutex<Vec<String>>>,
}

impl LoopState {
    fn now(&self) -> Tick {
        self.started.elapsed().as_millis() as Tick
    }

    fn run(&mut self, rx: Receiver<Command>) {
        loop {
            let timeout = self
                .timers
                .peek()
                .map(|Reverse((due, ..))| due.saturating_duration_since(Instant::now()))
                .unwrap_or(Duration::from_millis(50));
            match rx.recv_timeout(timeout) {
                Ok(Command::Shutdown) | Err(RecvTimeoutError::Disconnected) => return,
                Ok(Command::Register(agent, reply)) => {
                    let _ = reply.send(self.register(agent));
                }
                Ok(Command::Inject(from, to, body, reply)) => {
                    let mut ctx = Ctx::new(self.now(), from, &mut self.next_id);
                    let id = ctx.send(to, body);
                    let actions = std::mem::take(&mut ctx.actions);
                    self.apply(from, actions);
                    let _ = reply.send(id);
                }
                Ok(Command::Frame(bytes, conn)) => self.on_frame(&bytes, conn),
                Err(RecvTimeoutError::Timeout) => {}
            }
            self.fire_timers();
        }
    }

    fn error(&self, msg: String) {
        self.errors.lock().expect("error lock").push(msg);
    }

    fn register(&mut self, mut agent: Box<dyn Agent>) -> Result<(), BusError> {
        let id = agent.id();
        if self.agents.contains_key(&id) {
            return Err(BusError::DuplicateAgent(id));
        }
        let mut ctx = Ctx::new(self.now(), id, &mut self.next_id);
        agent.on_start(&mut ctx);
        let actions = std::mem::take(&mut ctx.actions);
        self.agents.insert(id, agent);
        self.apply(id, actions);
        Ok(())
    }

    fn fire_timers(&mut self) {
        while let Some(Reverse((due, _, agent, token))) = self.timers.peek().copied() {
            if due > Instant::now() {
                break;
            }
            self.timers.pop();
            self.with_agent(agent, |a, ctx| a.on_timer(token, ctx));
        }
    }

    fn on_frame(&mut self, bytes: &[u8], conn: Option<Conn>) {
        let env = match protocol::deserialize(bytes) {
            Ok(env) => env,
            Err(e) => return self.error(format!("bad inbound frame: {e}")),
        };
        let sender = env.header.sender;
        if let Some(conn) = conn {
            if !self.agents.contains_key(&sender) && !self.peers.contains_key(&sender) {
                self.learned.insert(sender, conn);
            }
        }
        self.deliver(env);
    }

    fn deliver(&mut self, env: Envelope) {
        let to = env.header.recipient;
        if !self.agents.contains_key(&to) {
            self.error(format!("dead letter: {} to unknown {to}", env.kind()));
            let sender = env.header.sender;
            return self.with_agent(sender, |a, ctx| a.on_undeliverable(env, ctx));
        }
        if !self.seen.entry(to).or_default().insert(env.header.message_id) {
            return;
        }
        self.trace.lock().expect("trace lock").push(TraceRecord {
            delivered_at: self.now(),
            envelope: env.clone(),
        });
        self.with_agent(to, |a, ctx| a.handle(env, ctx));
    }

    fn with_agent(&mut self, id: AgentId, f: impl FnOnce(&mut dyn Agent, &mut Ctx<'_>)) {
        let Some(mut agent) = self.agents.remove(&id) else {
            return;
        };
        let now = self.now();
        let mut ctx = Ctx::new(now, id, &mut self.next_id);
        f(agent.as_mut(), &mut ctx);
        let actions = std::mem::take(&mut ctx.actions);
        self.agents.insert(id, agent);
        self.apply(id, actions);
    }

    fn apply(&mut self, from: AgentId, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send(env) => self.route(env),
                Action::Timer { delay, token, .. } => {
                    let due = Instant::now() + Duration::from_millis(delay);
                    self.timers.push(Reverse((due, self.timer_seq, from, token)));
                    self.timer_seq += 1;
                }
                Action::CancelTimer(token) => {
                    self.timers
                        .retain(|Reverse((_, _, agent, t))| !(*agent == from && *t == token));
                }
                Action::Spawn(agent) => {
                    if let Err(e) = self.register(agent) {
                        self.error(e.to_string());
                    }
                }
                Action::Stop => {
                    self.agents.remove(&from);
                }
            }
        }
    }

    fn route(&mut self, env: Envelope) {
        let to = env.header.recipient;
        if self.agents.contains_key(&to) {
            // local hops are queued behind pending work, in wire form
            let _ = self.commands.send(Command::Frame(protocol::serialize(&env), None));
            return;
        }
        let conn = match self.peers.get(&to).copied() {
            Some(addr) => match self.connect(addr) {
                Ok(c) => Some(c),
                Err(e) => {
                    self.error(format!("connect {addr}: {e}"));
                    None
                }
            },
            None => self.learned.get(&to).cloned(),
        };
        let sent = conn.is_some_and(|c| {
            let mut w = c.lock().expect("conn lock");
            protocol::write_frame(&mut *w, &protocol::serialize(&env)).is_ok()
        });
        if !sent {
            self.error(format!("undeliverable {} to {to}", env.kind()));
            let sender = env.header.sender;
            self.with_agent(sender, |a, ctx| a.on_undeliverable(env, ctx));
        }
    }

    fn connect(&mut self, addr: SocketAddr) -> std::io::Result<Conn> {
        if let Some(c) = self.outbound.get(&addr) {
            return Ok(c.clone());
        }
        let stream = TcpStream::connect(addr)?;
        let _ = stream.set_nodelay(true);
        // replies may come back on this connection
        spawn_reader(stream.try_clone()?, self.commands.clone());
        let conn: Conn = Arc::new(Mutex::new(BufWriter::new(stream)));
        self.outbound.insert(addr, conn.clone());
        Ok(conn)
    }
}
