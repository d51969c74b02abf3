//! Deterministic discrete-event bus.
//!
//! Every envelope is serialized at send time and parsed again at delivery, so
//! simulated runs exercise the same bytes as the TCP transport. Latency is one
//! tick plus seeded jitter; per-pair sequence numbers and a reorder buffer keep
//! each (sender, recipient) pair FIFO, and receivers drop repeated message ids.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, Agent, BusError, Ctx, TraceRecord};
use crate::domain::{AgentId, Tick};
use crate::protocol::{self, Envelope, MessageBody, MessageId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Extra delivery delay is drawn from `0..=max_jitter`.
    pub max_jitter: Tick,
    /// Delay before a dropped transmission is sent again.
    pub retry_delay: Tick,
    /// `run_until_idle` gives up past this tick.
    pub max_ticks: Tick,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            max_jitter: 2,
            retry_delay: 5,
            max_ticks: 1_000_000,
        }
    }
}

/// Scripted transport faults, by global transmission index (0-based).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkFaults {
    #[serde(default)]
    pub drop: BTreeSet<u64>,
    #[serde(default)]
    pub duplicate: BTreeSet<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub transmissions: u64,
    pub dropped: u64,
    pub duplicates_suppressed: u64,
    pub dead_letters: u64,
}

type Pair = (AgentId, AgentId);

enum Event {
    Transmit {
        pair: Pair,
        seq: u64,
        bytes: Vec<u8>,
    },
    Deliver {
        pair: Pair,
        seq: u64,
        bytes: Vec<u8>,
    },
    Timer {
        agent: AgentId,
        token: u64,
        background: bool,
    },
}

impl Event {
    fn background(&self) -> bool {
        matches!(self, Event::Timer { background: true, .. })
    }
}

pub struct SimBus {
    cfg: SimConfig,
    now: Tick,
    rng: ChaCha8Rng,
    next_msg_id: u64,
    next_event: u64,
    events: BTreeMap<(Tick, u64), Event>,
    foreground: usize,
    agents: BTreeMap<AgentId, Box<dyn Agent>>,
    send_seq: BTreeMap<Pair, u64>,
    recv_next: BTreeMap<Pair, u64>,
    reorder: BTreeMap<Pair, BTreeMap<u64, Envelope>>,
    seen: BTreeMap<AgentId, BTreeSet<MessageId>>,
    faults: LinkFaults,
    stats: SimStats,
    trace: Vec<TraceRecord>,
    dead_letters: Vec<Envelope>,
}

impl SimBus {
    pub fn new(cfg: SimConfig) -> Self {
        SimBus {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            now: 0,
            next_msg_id: 1,
            next_event: 0,
            events: BTreeMap::new(),
            foreground: 0,
            agents: BTreeMap::new(),
            send_seq: BTreeMap::new(),
            recv_next: BTreeMap::new(),
            reorder: BTreeMap::new(),
            seen: BTreeMap::new(),
            faults: LinkFaults::default(),
            stats: SimStats::default(),
            trace: Vec::new(),
            dead_letters: Vec::new(),
        }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(SimConfig {
            seed,
            ..SimConfig::default()
        })
    }

    pub fn set_link_faults(&mut self, faults: LinkFaults) {
        self.faults = faults;
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn dead_letters(&self) -> &[Envelope] {
        &self.dead_letters
    }

    pub fn is_registered(&self, id: AgentId) -> bool {
        self.agents.contains_key(&id)
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.agents.keys().copied().collect()
    }

    /// True when nothing but background timers is scheduled.
    pub fn is_idle(&self) -> bool {
        self.foreground == 0
    }

    pub fn register(&mut self, mut agent: Box<dyn Agent>) -> Result<(), BusError> {
        let id = agent.id();
        if self.agents.contains_key(&id) {
            return Err(BusError::DuplicateAgent(id));
        }
        let mut ctx = Ctx::new(self.now, id, &mut self.next_msg_id);
        agent.on_start(&mut ctx);
        let actions = std::mem::take(&mut ctx.actions);
        self.agents.insert(id, agent);
        self.apply(id, actions);
        Ok(())
    }

    /// Sends a message from outside any agent, e.g. from the tester.
    pub fn inject(&mut self, from: AgentId, to: AgentId, body: MessageBody) -> MessageId {
        let mut ctx = Ctx::new(self.now, from, &mut self.next_msg_id);
        let id = ctx.send(to, body);
        let actions = std::mem::take(&mut ctx.actions);
        self.apply(from, actions);
        id
    }

    /// Processes everything due up to `now + ticks`, then moves the clock there.
    pub fn advance(&mut self, ticks: Tick) {
        let target = self.now.saturating_add(ticks);
        while let Some(entry) = self.events.first_entry() {
            if entry.key().0 > target {
                break;
            }
            let ((at, _), event) = entry.remove_entry();
            self.now = at;
            self.process(event);
        }
        self.now = target;
    }

    pub fn advance_to(&mut self, tick: Tick) {
        if tick > self.now {
            self.advance(tick - self.now);
        }
    }

    /// Runs until only background timers remain. Returns false if the tick
    /// limit was hit first.
    pub fn run_until_idle(&mut self) -> bool {
        while self.foreground > 0 {
            let Some(entry) = self.events.first_entry() else {
                break;
            };
            if entry.key().0 > self.cfg.max_ticks {
                return false;
            }
            let ((at, _), event) = entry.remove_entry();
            self.now = at;
            self.process(event);
        }
        true
    }

    fn schedule(&mut self, at: Tick, event: Event) {
        if !event.background() {
            self.foreground += 1;
        }
        self.events.insert((at, self.next_event), event);
        self.next_event += 1;
    }

    fn latency(&mut self) -> Tick {
        1 + self.rng.gen_range(0..=self.cfg.max_jitter)
    }

    fn process(&mut self, event: Event) {
        if !event.background() {
            self.foreground -= 1;
        }
        match event {
            Event::Transmit { pair, seq, bytes } => self.transmit(pair, seq, bytes),
            Event::Deliver { pair, seq, bytes } => self.arrive(pair, seq, &bytes),
            Event::Timer { agent, token, .. } => self.with_agent(agent, |a, ctx| a.on_timer(token, ctx)),
        }
    }

    fn apply(&mut self, from: AgentId, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send(env) => {
                    let pair = (env.header.sender, env.header.recipient);
                    let seq = self.send_seq.entry(pair).or_insert(0);
                    let this = *seq;
                    *seq += 1;
                    self.transmit(pair, this, protocol::serialize(&env));
                }
                Action::Timer {
                    delay,
                    token,
                    background,
                } => {
                    let at = self.now + delay;
                    self.schedule(
                        at,
                        Event::Timer {
                            agent: from,
                            token,
                            background,
                        },
                    );
                }
                Action::CancelTimer(token) => {
                    let mut foreground = 0;
                    self.events.retain(|_, e| match e {
                        Event::Timer {
                            agent,
                            token: t,
                            background,
                        } if *agent == from && *t == token => {
                            foreground += usize::from(!*background);
                            false
                        }
                        _ => true,
                    });
                    self.foreground -= foreground;
                }
                Action::Spawn(agent) => {
                    // a clash means a bug in the spawning agent; keep the original
                    let _ = self.register(agent);
                }
                Action::Stop => {
                    self.agents.remove(&from);
                }
            }
        }
    }

    fn transmit(&mut self, pair: Pair, seq: u64, bytes: Vec<u8>) {
        let index = self.stats.transmissions;
        self.stats.transmissions += 1;
        if self.faults.drop.contains(&index) {
            self.stats.dropped += 1;
            let at = self.now + self.cfg.retry_delay.max(1);
            self.schedule(at, Event::Transmit { pair, seq, bytes });
            return;
        }
        if self.faults.duplicate.contains(&index) {
            let at = self.now + self.latency();
            self.schedule(
                at,
                Event::Deliver {
                    pair,
                    seq,
                    bytes: bytes.clone(),
                },
            );
        }
        let at = self.now + self.latency();
        self.schedule(at, Event::Deliver { pair, seq, bytes });
    }

    fn arrive(&mut self, pair: Pair, seq: u64, bytes: &[u8]) {
        let env = protocol::deserialize(bytes).expect("bus only carries serialized envelopes");
        let to = pair.1;
        if !self.agents.contains_key(&to) {
            let next = self.recv_next.entry(pair).or_insert(0);
            *next = (*next).max(seq + 1);
            self.dead_letter(env);
            return;
        }
        if self.seen.get(&to).is_some_and(|s| s.contains(&env.header.message_id)) {
            self.stats.duplicates_suppressed += 1;
            return;
        }
        let expected = self.recv_next.get(&pair).copied().unwrap_or(0);
        if seq > expected {
            let buffered = self.reorder.entry(pair).or_default();
            if buffered.insert(seq, env).is_some() {
                self.stats.duplicates_suppressed += 1;
            }
            return;
        }
        if seq < expected {
            self.stats.duplicates_suppressed += 1;
            return;
        }
        self.dispatch(pair, env);
        loop {
            let next = self.recv_next.get(&pair).copied().unwrap_or(0);
            let Some(env) = self.reorder.get_mut(&pair).and_then(|b| b.remove(&next)) else {
                break;
            };
            if !self.agents.contains_key(&to) {
                self.recv_next.insert(pair, next + 1);
                self.dead_letter(env);
                continue;
            }
            self.dispatch(pair, env);
        }
    }

    fn dispatch(&mut self, pair: Pair, env: Envelope) {
        let to = pair.1;
        *self.recv_next.entry(pair).or_insert(0) += 1;
        self.seen.entry(to).or_default().insert(env.header.message_id);
        self.trace.push(TraceRecord {
            delivered_at: self.now,
            envelope: env.clone(),
        });
        self.with_agent(to, |a, ctx| a.handle(env, ctx));
    }

    fn dead_letter(&mut self, env: Envelope) {
        self.stats.dead_letters += 1;
        self.dead_letters.push(env.clone());
        let sender = env.header.sender;
        self.with_agent(sender, |a, ctx| a.on_undeliverable(env, ctx));
    }

    fn with_agent(&mut self, id: AgentId, f: impl FnOnce(&mut dyn Agent, &mut Ctx<'_>)) {
        let Some(mut agent) = self.agents.remove(&id) else {
            return;
        };
        let mut ctx = Ctx::new(self.now, id, &mut self.next_msg_id);
        f(agent.as_mut(), &mut ctx);
        let actions = std::mem::take(&mut ctx.actions);
        self.agents.insert(id, agent);
        self.apply(id, actions);
    }
}
