//! Deterministic discrete-event engine.
//!
//! One logical thread pops events in `(time, seq)` order. Every node draws
//! its compute latencies from its own seeded stream and every directed link
//! its network latencies from another, so a latency belongs to a fixed step
//! or message no matter how events interleave. Delivery is reliable but not
//! FIFO: two messages on the same link may cross.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::{Broadcast, Message, Node, ProtocolError, SyncDecision};
use crate::seeding::{self, tag};
use crate::topology::Topology;
use crate::trace::{Trace, TraceKind, TraceRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid delay model: {0}")]
    InvalidDelay(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("straggler factor must be >= 1 (got {0})")]
    BadStragglerFactor(f64),
    #[error("{agents} agents for a {nodes}-node topology")]
    Mismatch { agents: usize, nodes: usize },
    #[error("deadlock at t={time}ms: {}", describe_blocked(.blocked))]
    Deadlock { time: f64, blocked: Vec<BlockedNode> },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockedNode {
    pub node: usize,
    pub status: NodeStatus,
    pub round: u64,
    pub h: u64,
}

fn describe_blocked(blocked: &[BlockedNode]) -> String {
    blocked
        .iter()
        .map(|b| format!("node {} {:?} at round {} step {}", b.node, b.status, b.round, b.h))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Uniform latency in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub lo: f64,
    pub hi: f64,
}

impl Latency {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Latency { lo, hi }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo < 0.0 || self.lo > self.hi {
            return Err(SimError::InvalidDelay(format!(
                "latency range [{}, {}] must satisfy 0 <= lo <= hi",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayModel {
    /// Per-iteration compute latency.
    pub compute: Latency,
    /// Per-message network latency.
    pub network: Latency,
    /// Persistent compute multipliers, `(node, factor)`.
    pub stragglers: Vec<(usize, f64)>,
    /// When set, one node per round index runs its compute this many times
    /// slower; the slowed node is drawn independently for every round.
    pub roaming_straggler: Option<f64>,
}

pub const DEFAULT_COMPUTE: Latency = Latency::new(0.1, 1.0);
pub const DEFAULT_NETWORK: Latency = Latency::new(0.1, 1.5);

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel {
            compute: DEFAULT_COMPUTE,
            network: DEFAULT_NETWORK,
            stragglers: Vec::new(),
            roaming_straggler: None,
        }
    }
}

impl DelayModel {
    pub fn zero() -> Self {
        DelayModel {
            compute: Latency::new(0.0, 0.0),
            network: Latency::new(0.0, 0.0),
            ..DelayModel::default()
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), SimError> {
        self.compute.validate()?;
        self.network.validate()?;
        for &(node, factor) in &self.stragglers {
            if node >= n {
                return Err(SimError::UnknownNode(node));
            }
            if !(factor >= 1.0) || !factor.is_finite() {
                return Err(SimError::BadStragglerFactor(factor));
            }
        }
        if let Some(f) = self.roaming_straggler {
            if !(f >= 1.0) || !f.is_finite() {
                return Err(SimError::BadStragglerFactor(f));
            }
        }
        Ok(())
    }
}

/// Result of polling an agent that is free to act.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Poll {
    /// One SGD step was taken; the agent is busy for one compute latency.
    Step { round: u64, h: u64 },
    /// A communication round closed; its broadcast is in the outbox.
    RoundEnd { round: u64 },
    /// A threshold broadcast is in the outbox.
    Broadcast { index: u64, t: u64 },
    /// Blocked until a message arrives.
    Wait { round: u64, h: u64 },
    Done,
}

/// A participant the engine can drive.
pub trait Agent {
    fn poll(&mut self, outbox: &mut Vec<Broadcast>) -> Result<Poll, ProtocolError>;
    fn receive(&mut self, msg: &Message) -> Result<(), ProtocolError>;
    fn model(&self) -> &[f64];
    fn iterations(&self) -> u64;
    /// Current `(round, h)`, for diagnostics.
    fn progress(&self) -> (u64, u64);
}

impl Agent for Node {
    fn poll(&mut self, outbox: &mut Vec<Broadcast>) -> Result<Poll, ProtocolError> {
        if self.is_finished() {
            return Ok(Poll::Done);
        }
        if self.round_complete() {
            let round = self.round();
            outbox.push(self.end_of_round()?);
            return Ok(Poll::RoundEnd { round });
        }
        if self.sync_enabled() {
            if let SyncDecision::Wait { .. } = self.check_sync() {
                return Ok(Poll::Wait {
                    round: self.round(),
                    h: self.h(),
                });
            }
        }
        let info = self.local_step()?;
        Ok(Poll::Step {
            round: info.round,
            h: info.h,
        })
    }

    fn receive(&mut self, msg: &Message) -> Result<(), ProtocolError> {
        self.on_receive(msg)
    }

    fn model(&self) -> &[f64] {
        Node::model(self)
    }

    fn iterations(&self) -> u64 {
        Node::iterations(self)
    }

    fn progress(&self) -> (u64, u64) {
        (self.round(), self.h())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Idle,
    Busy,
    Waiting,
    Done,
}

#[derive(Debug, Clone)]
enum EventKind {
    StepDone(usize),
    Deliver(usize, Message),
    Wake(usize),
}

#[derive(Debug, Clone)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Snapshot handed to the round-end observer.
pub struct RoundEndView<'a> {
    pub node: usize,
    pub round: u64,
    pub time: f64,
    pub iterations: u64,
    pub model: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimStats {
    /// Virtual time of the last processed event.
    pub duration_ms: f64,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub events: u64,
    /// Per node: virtual time at which its last step completed.
    pub finish_ms: Vec<f64>,
    /// Per node: total virtual time spent at the delay checkpoint.
    pub wait_ms: Vec<f64>,
    /// Per node: rounds closed (or broadcasts sent, for threshold agents).
    pub sends: Vec<u64>,
}

#[derive(Debug)]
pub struct SimOutcome<A> {
    pub agents: Vec<A>,
    pub trace: Option<Trace>,
    pub stats: SimStats,
}

pub struct Engine<A> {
    agents: Vec<A>,
    topology: Topology,
    status: Vec<NodeStatus>,
    wake_pending: Vec<bool>,
    wait_since: Vec<f64>,
    queue: BinaryHeap<Reverse<Event>>,
    now: f64,
    seq: u64,
    compute_rng: Vec<ChaCha8Rng>,
    /// Keyed by `(from, to)`, created on first use.
    network_rng: BTreeMap<(usize, usize), ChaCha8Rng>,
    compute: Latency,
    network: Latency,
    factors: Vec<f64>,
    roaming: Option<f64>,
    seed: u64,
    trace: Option<Trace>,
    stats: SimStats,
    outbox: Vec<Broadcast>,
}

impl<A: Agent> Engine<A> {
    pub fn new(agents: Vec<A>, topology: Topology, delay: &DelayModel, seed: u64) -> Result<Self, SimError> {
        let n = topology.node_count();
        if agents.len() != n {
            return Err(SimError::Mismatch {
                agents: agents.len(),
                nodes: n,
            });
        }
        delay.validate(n)?;
        let mut factors = vec![1.0; n];
        for &(node, f) in &delay.stragglers {
            factors[node] = f;
        }
        Ok(Engine {
            agents,
            topology,
            status: vec![NodeStatus::Idle; n],
            wake_pending: vec![false; n],
            wait_since: vec![0.0; n],
            queue: BinaryHeap::new(),
            now: 0.0,
            seq: 0,
            compute_rng: (0..n).map(|c| seeding::stream(seed, tag::COMPUTE, c as u64)).collect(),
            network_rng: BTreeMap::new(),
            compute: delay.compute,
            network: delay.network,
            factors,
            roaming: delay.roaming_straggler,
            seed,
            trace: None,
            stats: SimStats {
                finish_ms: vec![0.0; n],
                wait_ms: vec![0.0; n],
                sends: vec![0; n],
                ..SimStats::default()
            },
            outbox: Vec::new(),
        })
    }

    pub fn record_trace(mut self, on: bool) -> Self {
        self.trace = on.then(|| Trace::new(self.topology.clone()));
        self
    }

    /// Scales every later compute sample of `node` by `factor`.
    pub fn set_straggler(&mut self, node: usize, factor: f64) -> Result<(), SimError> {
        if node >= self.agents.len() {
            return Err(SimError::UnknownNode(node));
        }
        if !(factor >= 1.0) || !factor.is_finite() {
            return Err(SimError::BadStragglerFactor(factor));
        }
        self.factors[node] = factor;
        Ok(())
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    fn schedule(&mut self, time: f64, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Event { time, seq, kind }));
    }

    /// Enqueues delivery of `msg` to `to` after `latency` ms.
    pub fn deliver(&mut self, to: usize, msg: Message, latency: f64) {
        debug_assert!(latency >= 0.0);
        self.stats.messages_sent += 1;
        self.schedule(self.now + latency, EventKind::Deliver(to, msg));
    }

    fn log(&mut self, node: usize, kind: TraceKind) {
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord {
                time: self.now,
                node,
                kind,
            });
        }
    }

    fn roaming_node(&self, round: u64) -> usize {
        (seeding::derive_seed(self.seed, tag::ROAMING, round) % self.agents.len() as u64) as usize
    }

    fn compute_latency(&mut self, node: usize, round: u64) -> f64 {
        let mut factor = self.factors[node];
        if let Some(f) = self.roaming {
            if self.roaming_node(round) == node {
                factor *= f;
            }
        }
        self.compute.sample(&mut self.compute_rng[node]) * factor
    }

    fn flush_outbox(&mut self) {
        let outbox = std::mem::take(&mut self.outbox);
        for b in &outbox {
            for &to in &b.to {
                let from = b.message.sender;
                let seed = self.seed;
                let n = self.agents.len() as u64;
                let rng = self
                    .network_rng
                    .entry((from, to))
                    .or_insert_with(|| seeding::stream(seed, tag::NETWORK, from as u64 * n + to as u64));
                let latency = self.network.sample(rng);
                self.deliver(to, b.message.clone(), latency);
            }
        }
        self.outbox = outbox;
        self.outbox.clear();
    }

    fn advance<F: FnMut(RoundEndView<'_>)>(&mut self, node: usize, observer: &mut F) -> Result<(), SimError> {
        loop {
            let mut outbox = std::mem::take(&mut self.outbox);
            let poll = self.agents[node].poll(&mut outbox);
            self.outbox = outbox;
            match poll? {
                Poll::Step { round, h } => {
                    if self.status[node] == NodeStatus::Waiting {
                        self.stats.wait_ms[node] += self.now - self.wait_since[node];
                        self.log(node, TraceKind::WaitExit { round, h: h - 1 });
                    }
                    self.log(node, TraceKind::GradComputed { round, h });
                    let latency = self.compute_latency(node, round);
                    self.status[node] = NodeStatus::Busy;
                    self.schedule(self.now + latency, EventKind::StepDone(node));
                    return Ok(());
                }
                Poll::RoundEnd { round } => {
                    if self.status[node] == NodeStatus::Waiting {
                        self.stats.wait_ms[node] += self.now - self.wait_since[node];
                        let (r, h) = self.agents[node].progress();
                        self.log(node, TraceKind::WaitExit { round: r, h });
                        self.status[node] = NodeStatus::Idle;
                    }
                    self.log(node, TraceKind::RoundEnd { round });
                    self.stats.sends[node] += 1;
                    self.flush_outbox();
                    let agent = &self.agents[node];
                    observer(RoundEndView {
                        node,
                        round,
                        time: self.now,
                        iterations: agent.iterations(),
                        model: agent.model(),
                    });
                }
                Poll::Broadcast { index, t } => {
                    self.log(node, TraceKind::Broadcast { index, t });
                    self.stats.sends[node] += 1;
                    self.flush_outbox();
                }
                Poll::Wait { round, h } => {
                    if self.status[node] != NodeStatus::Waiting {
                        self.log(node, TraceKind::WaitEnter { round, h });
                        self.wait_since[node] = self.now;
                        self.status[node] = NodeStatus::Waiting;
                    }
                    return Ok(());
                }
                Poll::Done => {
                    self.status[node] = NodeStatus::Done;
                    self.stats.finish_ms[node] = self.now;
                    return Ok(());
                }
            }
        }
    }

    pub fn run(self) -> Result<SimOutcome<A>, SimError> {
        self.run_with(|_| {})
    }

    /// Runs to quiescence, calling `observer` at every round end.
    pub fn run_with<F: FnMut(RoundEndView<'_>)>(mut self, mut observer: F) -> Result<SimOutcome<A>, SimError> {
        for node in 0..self.agents.len() {
            self.schedule(0.0, EventKind::Wake(node));
            self.wake_pending[node] = true;
        }
        while let Some(Reverse(event)) = self.queue.pop() {
            debug_assert!(event.time >= self.now);
            self.now = event.time;
            self.stats.events += 1;
            match event.kind {
                EventKind::StepDone(node) => {
                    self.status[node] = NodeStatus::Idle;
                    self.advance(node, &mut observer)?;
                }
                EventKind::Wake(node) => {
                    self.wake_pending[node] = false;
                    if matches!(self.status[node], NodeStatus::Idle | NodeStatus::Waiting) {
                        self.advance(node, &mut observer)?;
                    }
                }
                EventKind::Deliver(node, msg) => {
                    self.agents[node].receive(&msg)?;
                    self.stats.messages_delivered += 1;
                    self.log(
                        node,
                        TraceKind::UpdateApplied {
                            sender: msg.sender,
                            round: msg.round,
                        },
                    );
                    if self.status[node] == NodeStatus::Waiting && !self.wake_pending[node] {
                        self.wake_pending[node] = true;
                        self.schedule(self.now, EventKind::Wake(node));
                    }
                }
            }
        }
        self.stats.duration_ms = self.now;
        let blocked: Vec<BlockedNode> = self
            .status
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != NodeStatus::Done)
            .map(|(node, &status)| {
                let (round, h) = self.agents[node].progress();
                BlockedNode {
                    node,
                    status,
                    round,
                    h,
                }
            })
            .collect();
        if !blocked.is_empty() {
            return Err(SimError::Deadlock {
                time: self.now,
                blocked,
            });
        }
        Ok(SimOutcome {
            agents: self.agents,
            trace: self.trace,
            stats: self.stats,
        })
    }
}
