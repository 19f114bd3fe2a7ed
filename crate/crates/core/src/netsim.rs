//! Deterministic virtual-time network.
//!
//! Endpoints exchange [`Envelope`]s over point-to-point links with a fixed
//! one-way latency. Optionally every endpoint has an access link of finite
//! bandwidth whose uplink and downlink each carry one envelope at a time.
//! Every envelope is
//! charged to the [`TrafficLedger`] under its link class and message kind at
//! send time. Events are processed in `(time, insertion order)` order, so a
//! run is a pure function of its initial state.
//!
//! Behaviour lives in [`Actor`]s registered per endpoint; envelopes for
//! endpoints without an actor are parked in a mailbox for inspection.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::string::String;
use alloc::vec::Vec;
use core::any::Any;
use core::cmp::{Ordering, Reverse};
use core::fmt::Write as _;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::model::{Millis, RequestId};
use crate::wire::{Codec, EndpointId, Envelope, MessageKind};

/// Bounds of the default latency sampler, in milliseconds (inclusive).
pub const MIN_LATENCY_MS: Millis = 20;
pub const MAX_LATENCY_MS: Millis = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Client,
    Node,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    ClientNode,
    NodeNode,
    NodeServer,
    ClientServer,
}

impl LinkClass {
    pub const ALL: [LinkClass; 4] =
        [LinkClass::ClientNode, LinkClass::NodeNode, LinkClass::NodeServer, LinkClass::ClientServer];

    pub fn between(a: EndpointKind, b: EndpointKind) -> Option<LinkClass> {
        use EndpointKind::*;
        match (a.min(b), a.max(b)) {
            (Client, Node) => Some(LinkClass::ClientNode),
            (Node, Node) => Some(LinkClass::NodeNode),
            (Node, Server) => Some(LinkClass::NodeServer),
            (Client, Server) => Some(LinkClass::ClientServer),
            _ => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            LinkClass::ClientNode => "client_node",
            LinkClass::NodeNode => "node_node",
            LinkClass::NodeServer => "node_server",
            LinkClass::ClientServer => "client_server",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NetError {
    #[error("no link between {from} and {to}")]
    NoRoute { from: EndpointId, to: EndpointId },
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(EndpointId),
    #[error("duplicate endpoint {0}")]
    DuplicateEndpoint(EndpointId),
    #[error("endpoints {0} and {1} cannot be linked")]
    InvalidLink(EndpointId, EndpointId),
    #[error("{0} is not a node")]
    NotANode(EndpointId),
    #[error("time limit {limit} ms reached with {pending} events pending")]
    TimeLimitExceeded { limit: Millis, pending: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub a: EndpointId,
    pub b: EndpointId,
    pub latency_ms: Millis,
    pub class: LinkClass,
}

fn pair(a: EndpointId, b: EndpointId) -> (EndpointId, EndpointId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Endpoints and the links between them. Links are undirected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Topology {
    endpoints: BTreeMap<EndpointId, EndpointKind>,
    links: BTreeMap<(EndpointId, EndpointId), Link>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_endpoint(&mut self, id: EndpointId, kind: EndpointKind) -> Result<(), NetError> {
        if self.endpoints.insert(id, kind).is_some() {
            return Err(NetError::DuplicateEndpoint(id));
        }
        Ok(())
    }

    pub fn connect(&mut self, a: EndpointId, b: EndpointId, latency_ms: Millis) -> Result<(), NetError> {
        let ka = self.kind(a).ok_or(NetError::UnknownEndpoint(a))?;
        let kb = self.kind(b).ok_or(NetError::UnknownEndpoint(b))?;
        let class = LinkClass::between(ka, kb).ok_or(NetError::InvalidLink(a, b))?;
        if a == b {
            return Err(NetError::InvalidLink(a, b));
        }
        let (a, b) = pair(a, b);
        self.links.insert((a, b), Link { a, b, latency_ms, class });
        Ok(())
    }

    pub fn kind(&self, id: EndpointId) -> Option<EndpointKind> {
        self.endpoints.get(&id).copied()
    }

    pub fn link(&self, a: EndpointId, b: EndpointId) -> Option<&Link> {
        self.links.get(&pair(a, b))
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    pub fn endpoints(&self) -> impl Iterator<Item = (EndpointId, EndpointKind)> + '_ {
        self.endpoints.iter().map(|(id, k)| (*id, *k))
    }

    pub fn nodes(&self) -> impl Iterator<Item = EndpointId> + '_ {
        self.endpoints_of(EndpointKind::Node)
    }

    pub fn endpoints_of(&self, kind: EndpointKind) -> impl Iterator<Item = EndpointId> + '_ {
        self.endpoints.iter().filter(move |(_, k)| **k == kind).map(|(id, _)| *id)
    }

    /// Endpoints directly linked to `id`, in id order.
    pub fn neighbors(&self, id: EndpointId) -> impl Iterator<Item = EndpointId> + '_ {
        self.links.values().filter_map(move |l| {
            if l.a == id {
                Some(l.b)
            } else if l.b == id {
                Some(l.a)
            } else {
                None
            }
        })
    }

    /// Node endpoints directly linked to `id`.
    pub fn node_neighbors(&self, id: EndpointId) -> Vec<EndpointId> {
        self.neighbors(id).filter(|n| self.kind(*n) == Some(EndpointKind::Node)).collect()
    }

    pub fn max_latency(&self) -> Millis {
        self.links.values().map(|l| l.latency_ms).max().unwrap_or(0)
    }

    /// Latency matrix as rows of `a,b,latency_ms`.
    pub fn latency_table(&self) -> String {
        let mut out = String::new();
        for l in self.links.values() {
            let _ = writeln!(out, "{},{},{}", l.a, l.b, l.latency_ms);
        }
        out
    }
}

/// Latency for an endpoint pair, uniform over
/// `[MIN_LATENCY_MS, MAX_LATENCY_MS]` and seeded by `(seed, ordered pair)`.
pub fn sample_latency(seed: u64, a: EndpointId, b: EndpointId) -> Millis {
    let (a, b) = pair(a, b);
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(a.as_bytes());
    h.update(b.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    rng.random_range(MIN_LATENCY_MS..=MAX_LATENCY_MS)
}

/// Full mesh among `n_nodes` nodes, one client linked to every node and, if
/// requested, one server linked to every node and to the client.
pub fn build_topology(n_nodes: usize, seed: u64, with_server: bool) -> Topology {
    let mut t = Topology::new();
    let client = EndpointId::client();
    let server = EndpointId::server();
    let nodes: Vec<EndpointId> = (0..n_nodes).map(EndpointId::node).collect();
    t.add_endpoint(client, EndpointKind::Client).unwrap();
    for n in &nodes {
        t.add_endpoint(*n, EndpointKind::Node).unwrap();
    }
    if with_server {
        t.add_endpoint(server, EndpointKind::Server).unwrap();
    }
    let mut link = |a, b| t.connect(a, b, sample_latency(seed, a, b)).unwrap();
    for (i, a) in nodes.iter().enumerate() {
        for b in &nodes[i + 1..] {
            link(*a, *b);
        }
        link(client, *a);
        if with_server {
            link(*a, server);
        }
    }
    if with_server {
        link(client, server);
    }
    t
}

/// Cumulative bytes per (link class, message kind).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    bytes: BTreeMap<(LinkClass, MessageKind), u64>,
}

impl TrafficLedger {
    pub fn record(&mut self, class: LinkClass, kind: MessageKind, bytes: u64) {
        *self.bytes.entry((class, kind)).or_insert(0) += bytes;
    }

    pub fn get(&self, class: LinkClass, kind: MessageKind) -> u64 {
        self.bytes.get(&(class, kind)).copied().unwrap_or(0)
    }

    pub fn class_total(&self, class: LinkClass) -> u64 {
        self.bytes.iter().filter(|((c, _), _)| *c == class).map(|(_, b)| *b).sum()
    }

    pub fn kind_total(&self, kind: MessageKind) -> u64 {
        self.bytes.iter().filter(|((_, k), _)| *k == kind).map(|(_, b)| *b).sum()
    }

    pub fn total(&self) -> u64 {
        self.bytes.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.values().all(|b| *b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (LinkClass, MessageKind, u64)> + '_ {
        self.bytes.iter().map(|((c, k), b)| (*c, *k, *b))
    }

    /// Kinds with non-zero bytes on `class`.
    pub fn kinds_on(&self, class: LinkClass) -> BTreeSet<MessageKind> {
        self.iter().filter(|(c, _, b)| *c == class && *b > 0).map(|(_, k, _)| k).collect()
    }

    pub fn merge(&mut self, other: &TrafficLedger) {
        for (c, k, b) in other.iter() {
            self.record(c, k, b);
        }
    }

    /// CSV with header `link_class,message_kind,bytes`, one row per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("link_class,message_kind,bytes\n");
        for (c, k, b) in self.iter() {
            let _ = writeln!(out, "{},{},{}", c.name(), k.name(), b);
        }
        out
    }
}

/// Result of scheduling one envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryEvent {
    pub seq: u64,
    pub sent_at: Millis,
    pub deliver_at: Millis,
    pub wire_size: u64,
    pub class: LinkClass,
}

/// An envelope as observed on a link (captured when enabled).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentEnvelope {
    pub sent_at: Millis,
    pub deliver_at: Millis,
    pub class: LinkClass,
    pub envelope: Envelope,
}

#[derive(Debug)]
enum Event {
    Deliver(Envelope),
    Timer { endpoint: EndpointId, token: u64 },
}

#[derive(Debug)]
struct Scheduled {
    at: Millis,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Network state shared with actors through [`Ctx`].
#[derive(Debug)]
pub struct Network {
    topology: Topology,
    /// Access link capacity in bytes per millisecond; `None` is unlimited.
    bandwidth: Option<u64>,
    clock: Millis,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    uplink_free: BTreeMap<EndpointId, Millis>,
    downlink_free: BTreeMap<EndpointId, Millis>,
    down: BTreeSet<EndpointId>,
    ledger: TrafficLedger,
    link_bytes: BTreeMap<(EndpointId, EndpointId), u64>,
    capture: Option<Vec<SentEnvelope>>,
    dropped: u64,
}

impl Network {
    fn new(topology: Topology) -> Self {
        Network {
            topology,
            bandwidth: None,
            clock: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            uplink_free: BTreeMap::new(),
            downlink_free: BTreeMap::new(),
            down: BTreeSet::new(),
            ledger: TrafficLedger::default(),
            link_bytes: BTreeMap::new(),
            capture: None,
            dropped: 0,
        }
    }

    pub fn now(&self) -> Millis {
        self.clock
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn is_available(&self, id: EndpointId) -> bool {
        !self.down.contains(&id)
    }

    fn transmission_ms(&self, wire_size: u64) -> Millis {
        match self.bandwidth {
            None => 0,
            Some(bw) => wire_size.div_ceil(bw),
        }
    }

    /// Schedules `env` for delivery and charges its wire size to the ledger.
    /// Sends dated before the current clock are treated as sent now.
    pub fn send(&mut self, env: Envelope, at: Millis) -> Result<DeliveryEvent, NetError> {
        let link = *self
            .topology
            .link(env.sender, env.receiver)
            .ok_or(NetError::NoRoute { from: env.sender, to: env.receiver })?;
        let at = at.max(self.clock);
        let size = env.wire_size();
        let deliver_at = match self.bandwidth {
            None => at + link.latency_ms,
            Some(_) => {
                let tx = self.transmission_ms(size);
                let start = at.max(self.uplink_free.get(&env.sender).copied().unwrap_or(0));
                self.uplink_free.insert(env.sender, start + tx);
                let arrive = (start + link.latency_ms).max(self.downlink_free.get(&env.receiver).copied().unwrap_or(0));
                self.downlink_free.insert(env.receiver, arrive + tx);
                arrive + tx
            }
        };

        self.ledger.record(link.class, env.kind, size);
        *self.link_bytes.entry((link.a, link.b)).or_insert(0) += size;
        if let Some(log) = &mut self.capture {
            log.push(SentEnvelope { sent_at: at, deliver_at, class: link.class, envelope: env.clone() });
        }
        let seq = self.push(deliver_at, Event::Deliver(env));
        Ok(DeliveryEvent { seq, sent_at: at, deliver_at, wire_size: size, class: link.class })
    }

    pub fn schedule_timer(&mut self, endpoint: EndpointId, at: Millis, token: u64) -> u64 {
        let at = at.max(self.clock);
        self.push(at, Event::Timer { endpoint, token })
    }

    fn push(&mut self, at: Millis, event: Event) -> u64 {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq, event }));
        seq
    }
}

/// Handle given to an actor while it processes an event.
pub struct Ctx<'a> {
    me: EndpointId,
    net: &'a mut Network,
}

impl Ctx<'_> {
    pub fn me(&self) -> EndpointId {
        self.me
    }

    pub fn now(&self) -> Millis {
        self.net.clock
    }

    pub fn topology(&self) -> &Topology {
        &self.net.topology
    }

    pub fn send(
        &mut self,
        kind: MessageKind,
        to: EndpointId,
        codec: Codec,
        request_id: RequestId,
        body: impl Into<Bytes>,
    ) -> Result<DeliveryEvent, NetError> {
        let env = Envelope { kind, codec, sender: self.me, receiver: to, request_id, body: body.into() };
        let now = self.net.clock;
        self.net.send(env, now)
    }

    /// Fires `on_timer(token)` on this actor after `delay` ms.
    pub fn set_timer(&mut self, delay: Millis, token: u64) {
        let at = self.net.clock + delay;
        self.net.schedule_timer(self.me, at, token);
    }
}

/// Behaviour attached to an endpoint.
pub trait Actor: Any {
    fn on_envelope(&mut self, env: Envelope, ctx: &mut Ctx<'_>);

    fn on_timer(&mut self, _token: u64, _ctx: &mut Ctx<'_>) {}
}

/// A network plus the actors bound to its endpoints.
pub struct Simulation {
    net: Network,
    actors: BTreeMap<EndpointId, Box<dyn Actor>>,
    mailbox: BTreeMap<EndpointId, Vec<(Millis, Envelope)>>,
}

impl Simulation {
    pub fn new(topology: Topology) -> Self {
        Simulation { net: Network::new(topology), actors: BTreeMap::new(), mailbox: BTreeMap::new() }
    }

    /// Finite access-link bandwidth in bytes per millisecond. Envelopes leaving
    /// an endpoint share its uplink and envelopes reaching it share its
    /// downlink, each FIFO in send order.
    pub fn with_bandwidth(mut self, bytes_per_ms: Option<u64>) -> Self {
        self.net.bandwidth = bytes_per_ms.filter(|b| *b > 0);
        self
    }

    /// Keeps a copy of every envelope sent from now on.
    pub fn capture_envelopes(&mut self) {
        self.net.capture.get_or_insert_with(Vec::new);
    }

    pub fn captured(&self) -> &[SentEnvelope] {
        self.net.capture.as_deref().unwrap_or(&[])
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn now(&self) -> Millis {
        self.net.clock
    }

    pub fn topology(&self) -> &Topology {
        &self.net.topology
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.net.ledger
    }

    /// Returns the ledger accumulated so far and starts a fresh one.
    pub fn take_ledger(&mut self) -> TrafficLedger {
        core::mem::take(&mut self.net.ledger)
    }

    /// Bytes sent over the link between `a` and `b`, both directions.
    pub fn link_bytes(&self, a: EndpointId, b: EndpointId) -> u64 {
        self.net.link_bytes.get(&pair(a, b)).copied().unwrap_or(0)
    }

    /// Envelopes dropped because their receiver was unavailable.
    pub fn dropped(&self) -> u64 {
        self.net.dropped
    }

    pub fn pending(&self) -> usize {
        self.net.queue.len()
    }

    pub fn add_actor(&mut self, id: EndpointId, actor: impl Actor) -> Result<(), NetError> {
        if self.net.topology.kind(id).is_none() {
            return Err(NetError::UnknownEndpoint(id));
        }
        self.actors.insert(id, Box::new(actor));
        Ok(())
    }

    pub fn actor<T: Actor>(&self, id: EndpointId) -> Option<&T> {
        let a: &dyn Any = self.actors.get(&id)?.as_ref();
        a.downcast_ref()
    }

    pub fn actor_mut<T: Actor>(&mut self, id: EndpointId) -> Option<&mut T> {
        let a: &mut dyn Any = self.actors.get_mut(&id)?.as_mut();
        a.downcast_mut()
    }

    /// Runs `f` on the actor at `id` with a context at the current clock.
    pub fn with_actor<T: Actor, R>(&mut self, id: EndpointId, f: impl FnOnce(&mut T, &mut Ctx<'_>) -> R) -> Option<R> {
        let actor: &mut dyn Any = self.actors.get_mut(&id)?.as_mut();
        let actor = actor.downcast_mut::<T>()?;
        let mut ctx = Ctx { me: id, net: &mut self.net };
        Some(f(actor, &mut ctx))
    }

    /// Envelopes delivered to `id` while no actor was bound to it.
    pub fn mailbox(&self, id: EndpointId) -> &[(Millis, Envelope)] {
        self.mailbox.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn send(&mut self, env: Envelope, at: Millis) -> Result<DeliveryEvent, NetError> {
        self.net.send(env, at)
    }

    pub fn schedule_timer(&mut self, endpoint: EndpointId, at: Millis, token: u64) {
        self.net.schedule_timer(endpoint, at, token);
    }

    /// Unavailable nodes drop every envelope delivered to them and receive no
    /// timer events, so they neither answer nor heartbeat.
    pub fn set_available(&mut self, node: EndpointId, available: bool) -> Result<(), NetError> {
        match self.net.topology.kind(node) {
            Some(EndpointKind::Node) => {}
            Some(_) => return Err(NetError::NotANode(node)),
            None => return Err(NetError::UnknownEndpoint(node)),
        }
        if available {
            self.net.down.remove(&node);
        } else {
            self.net.down.insert(node);
        }
        Ok(())
    }

    pub fn is_available(&self, id: EndpointId) -> bool {
        self.net.is_available(id)
    }

    /// Processes the next event, if any. Returns its time.
    pub fn step(&mut self) -> Option<Millis> {
        let Reverse(next) = self.net.queue.pop()?;
        debug_assert!(next.at >= self.net.clock);
        self.net.clock = next.at;
        match next.event {
            Event::Deliver(env) => {
                let to = env.receiver;
                if !self.net.is_available(to) {
                    self.net.dropped += 1;
                } else if let Some(actor) = self.actors.get_mut(&to) {
                    let mut ctx = Ctx { me: to, net: &mut self.net };
                    actor.on_envelope(env, &mut ctx);
                } else {
                    self.mailbox.entry(to).or_default().push((next.at, env));
                }
            }
            Event::Timer { endpoint, token } => {
                if self.net.is_available(endpoint) {
                    if let Some(actor) = self.actors.get_mut(&endpoint) {
                        let mut ctx = Ctx { me: endpoint, net: &mut self.net };
                        actor.on_timer(token, &mut ctx);
                    }
                }
            }
        }
        Some(next.at)
    }

    /// Processes events until the queue is empty. Events due after `limit`
    /// are left queued and reported as an error.
    pub fn run_until_quiescent(&mut self, limit: Millis) -> Result<Millis, NetError> {
        while let Some(Reverse(next)) = self.net.queue.peek() {
            if next.at > limit {
                return Err(NetError::TimeLimitExceeded { limit, pending: self.net.queue.len() });
            }
            self.step();
        }
        Ok(self.net.clock)
    }
}
