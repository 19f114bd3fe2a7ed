//! The mesh node: request coordinator, scatter-gather, transformer dispatch,
//! change subscriptions and neighbour availability.

mod neighbors;
mod transform;

pub use neighbors::{NeighborModel, NeighborState};
pub use transform::{
    payload_bytes, TransformFn, TransformerRegistry, TransformerStats, AGGREGATE_MEAN, BUILTINS, DOWNSAMPLE, IDENTITY,
};

use alloc::collections::BTreeSet;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cell::RefCell;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::gather::{GatherEngine, GatherRecord};
use crate::model::{
    validate_request, ErrorBody, FieldSet, Millis, NodeId, Payload, QueryRequest, QueryResponse, RequestId, Scope,
    SensorReading, TransformerSpec, ValidationError,
};
use crate::netsim::{Actor, Ctx, Topology};
use crate::protocol::{decode_request, encode_response};
use crate::store::{ChangeEvent, InsertOutcome, LocalStore};
use crate::wire::{decode_json, decode_readings, Codec, EndpointId, Envelope, MessageKind, WireError};

pub const DEFAULT_HEARTBEAT_INTERVAL_MS: Millis = 1000;
pub const DEFAULT_HEARTBEAT_TIMEOUT_MS: Millis = 3000;

/// Timer token reserved for the heartbeat tick.
pub const HEARTBEAT_TICK: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("unknown transformer `{0}`")]
    TransformerUnknown(String),
    #[error("transformer `{transformer}`: invalid parameter `{param}`: {reason}")]
    InvalidParam { transformer: String, param: String, reason: String },
    #[error("`{0}` is not a member of the topology")]
    UnknownNode(EndpointId),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl NodeError {
    pub fn code(&self) -> &'static str {
        match self {
            NodeError::Validation(_) => "validation",
            NodeError::TransformerUnknown(_) => "transformer_unknown",
            NodeError::InvalidParam { .. } => "invalid_param",
            NodeError::UnknownNode(_) => "unknown_node",
            NodeError::Wire(_) => "wire",
        }
    }

    pub fn to_body(&self) -> ErrorBody {
        ErrorBody { code: self.code().to_string(), message: self.to_string() }
    }
}

fn default_interval() -> Millis {
    DEFAULT_HEARTBEAT_INTERVAL_MS
}

fn default_timeout() -> Millis {
    DEFAULT_HEARTBEAT_TIMEOUT_MS
}

fn default_transformers() -> Vec<String> {
    BUILTINS.iter().map(|s| s.to_string()).collect()
}

/// Per-node settings as they appear in a scenario config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: String,
    #[serde(default = "default_interval")]
    pub heartbeat_interval_ms: Millis,
    #[serde(default = "default_timeout")]
    pub heartbeat_timeout_ms: Millis,
    /// `None` derives the timeout from the topology, see [`default_gather_timeout`].
    #[serde(default)]
    pub gather_timeout_ms: Option<Millis>,
    #[serde(default = "default_transformers")]
    pub registered_transformers: Vec<String>,
    /// Transformer applied to each change before it is sent to subscribers.
    #[serde(default)]
    pub change_transformer: Option<TransformerSpec>,
}

impl NodeConfig {
    pub fn new(node_id: impl Into<String>) -> Self {
        NodeConfig {
            node_id: node_id.into(),
            heartbeat_interval_ms: DEFAULT_HEARTBEAT_INTERVAL_MS,
            heartbeat_timeout_ms: DEFAULT_HEARTBEAT_TIMEOUT_MS,
            gather_timeout_ms: None,
            registered_transformers: default_transformers(),
            change_transformer: None,
        }
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        EndpointId::new(&self.node_id)?;
        if self.heartbeat_interval_ms == 0 {
            return Err(ValidationError::new("heartbeat_interval_ms", "must be positive").into());
        }
        if self.heartbeat_timeout_ms < self.heartbeat_interval_ms {
            return Err(ValidationError::new("heartbeat_timeout_ms", "must be at least the interval").into());
        }
        if self.gather_timeout_ms == Some(0) {
            return Err(ValidationError::new("gather_timeout_ms", "must be positive").into());
        }
        TransformerRegistry::from_names(self.registered_transformers.iter().map(String::as_str))?;
        if let Some(t) = &self.change_transformer {
            if !self.registered_transformers.contains(&t.name) {
                return Err(NodeError::TransformerUnknown(t.name.clone()));
            }
        }
        Ok(())
    }
}

/// Twice the largest one-way latency plus 100 ms.
pub fn default_gather_timeout(topology: &Topology) -> Millis {
    2 * topology.max_latency() + 100
}

/// Answers `req` from `store` alone.
pub fn answer_local(
    store: &LocalStore,
    transformers: &mut TransformerRegistry,
    req: &QueryRequest,
    codec: Codec,
) -> Result<QueryResponse, NodeError> {
    validate_request(req)?;
    let fields = req.fields()?;
    let payload = match &req.transformer {
        Some(spec) => {
            if !transformers.contains(&spec.name) {
                return Err(NodeError::TransformerUnknown(spec.name.clone()));
            }
            let input = store.query(req.range, FieldSet::ALL);
            transformers.run(spec, &input, fields)?
        }
        None => Payload::Readings(store.query(req.range, fields)),
    };
    Ok(QueryResponse {
        request_id: req.request_id,
        payload,
        contributing_nodes: BTreeSet::from([store.node_id().clone()]),
        partial: false,
        codec,
    })
}

/// Error response for `request_id`.
pub fn error_response(request_id: RequestId, err: &NodeError, codec: Codec) -> QueryResponse {
    QueryResponse {
        request_id,
        payload: Payload::Error(err.to_body()),
        contributing_nodes: BTreeSet::new(),
        partial: true,
        codec,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SubscriptionId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub id: SubscriptionId,
    pub subscriber: EndpointId,
    pub filter: FieldSet,
}

impl Subscription {
    /// An empty filter or one without numeric fields matches every reading;
    /// otherwise at least one selected numeric field must be present.
    pub fn matches(&self, r: &SensorReading) -> bool {
        let mut numeric = self.filter.numeric().peekable();
        self.filter.is_empty() || numeric.peek().is_none() || numeric.any(|f| r.numeric(f).is_some())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SubscribeBody {
    filter: FieldSet,
}

/// A NOTIFY received from a publisher.
#[derive(Debug, Clone, PartialEq)]
pub struct Notification {
    pub from: EndpointId,
    pub at: Millis,
    pub body: Bytes,
    /// Readings from the body that were new to the local store.
    pub applied: usize,
}

pub struct SyncMeshNode {
    config: NodeConfig,
    store: LocalStore,
    changes: Rc<RefCell<Vec<ChangeEvent>>>,
    neighbors: NeighborModel,
    transformers: TransformerRegistry,
    subscriptions: Vec<Subscription>,
    next_subscription: u64,
    gather: GatherEngine,
    heartbeat_rounds: u64,
    notifications: Vec<Notification>,
    rejected: u64,
}

impl core::fmt::Debug for SyncMeshNode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SyncMeshNode")
            .field("node_id", &self.config.node_id)
            .field("store", &self.store)
            .field("subscriptions", &self.subscriptions.len())
            .finish_non_exhaustive()
    }
}

impl SyncMeshNode {
    /// Node over `store`, tracking the node neighbours of `config.node_id`
    /// in `topology`.
    pub fn new(config: NodeConfig, mut store: LocalStore, topology: &Topology) -> Result<Self, NodeError> {
        config.validate()?;
        let me = EndpointId::new(&config.node_id)?;
        if topology.kind(me).is_none() {
            return Err(NodeError::UnknownNode(me));
        }
        let transformers = TransformerRegistry::from_names(config.registered_transformers.iter().map(String::as_str))?;
        let changes = Rc::new(RefCell::new(Vec::new()));
        let sink = Rc::clone(&changes);
        store.register_listener(move |ev: &ChangeEvent| sink.borrow_mut().push(ev.clone()));
        let timeout = config.gather_timeout_ms.unwrap_or_else(|| default_gather_timeout(topology));
        Ok(SyncMeshNode {
            neighbors: NeighborModel::new(topology.node_neighbors(me), config.heartbeat_timeout_ms),
            gather: GatherEngine::new(timeout, Codec::Gzip),
            config,
            store,
            changes,
            transformers,
            subscriptions: Vec::new(),
            next_subscription: 0,
            heartbeat_rounds: 0,
            notifications: Vec::new(),
            rejected: 0,
        })
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn node_id(&self) -> &NodeId {
        self.store.node_id()
    }

    pub fn store(&self) -> &LocalStore {
        &self.store
    }

    pub fn neighbors(&self) -> &NeighborModel {
        &self.neighbors
    }

    pub fn transformers(&self) -> &TransformerRegistry {
        &self.transformers
    }

    pub fn subscriptions(&self) -> &[Subscription] {
        &self.subscriptions
    }

    pub fn notifications(&self) -> &[Notification] {
        &self.notifications
    }

    pub fn gather_timeout(&self) -> Millis {
        self.gather.timeout()
    }

    /// Completed scatter-gathers coordinated by this node.
    pub fn gathers(&self) -> &[GatherRecord] {
        self.gather.history()
    }

    /// Envelopes this node could not decode or act on.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    /// Stores `reading` and forwards the resulting change to subscribers.
    pub fn insert(&mut self, reading: SensorReading, ctx: &mut Ctx<'_>) -> Result<InsertOutcome, ValidationError> {
        let outcome = self.store.insert(reading)?;
        self.flush_changes(ctx);
        Ok(outcome)
    }

    fn flush_changes(&mut self, ctx: &mut Ctx<'_>) {
        let events = core::mem::take(&mut *self.changes.borrow_mut());
        for ev in &events {
            self.on_change(ev, ctx);
        }
    }

    /// Sends one NOTIFY per matching subscription. With a change transformer
    /// configured, subscribers receive its output instead of the reading.
    pub fn on_change(&mut self, ev: &ChangeEvent, ctx: &mut Ctx<'_>) {
        let matching: Vec<(EndpointId, FieldSet)> =
            self.subscriptions.iter().filter(|s| s.matches(&ev.reading)).map(|s| (s.subscriber, s.filter)).collect();
        if matching.is_empty() {
            return;
        }
        let transformed = self
            .config
            .change_transformer
            .clone()
            .map(|spec| self.transformers.run(&spec, core::slice::from_ref(&ev.reading), FieldSet::ALL));
        for (to, filter) in matching {
            let body = match &transformed {
                Some(Ok(p)) => payload_bytes(p, filter),
                Some(Err(e)) => serde_json::to_vec(&e.to_body()).expect("error serialization is infallible"),
                None => serde_json::to_vec(&ev.reading.projected(filter)).expect("reading serialization is infallible"),
            };
            // fire and forget: a down subscriber simply loses the notification
            let _ = ctx.send(MessageKind::Notify, to, Codec::None, RequestId(ev.seq as u128), body);
        }
    }

    /// Registers `subscriber` for changes matching `filter`. A repeated
    /// (subscriber, filter) pair returns the existing subscription.
    pub fn add_subscription(&mut self, subscriber: EndpointId, filter: FieldSet) -> SubscriptionId {
        if let Some(s) = self.subscriptions.iter().find(|s| s.subscriber == subscriber && s.filter == filter) {
            return s.id;
        }
        let id = SubscriptionId(self.next_subscription);
        self.next_subscription += 1;
        self.subscriptions.push(Subscription { id, subscriber, filter });
        id
    }

    /// Asks `publisher` to forward its changes matching `filter` to this node.
    pub fn subscribe_to(&self, publisher: EndpointId, filter: FieldSet, ctx: &mut Ctx<'_>) {
        let body = serde_json::to_vec(&SubscribeBody { filter }).expect("subscribe serialization is infallible");
        let _ = ctx.send(MessageKind::Subscribe, publisher, Codec::None, RequestId(0), body);
    }

    pub fn on_heartbeat(&mut self, from: EndpointId, at: Millis) -> Result<(), NodeError> {
        self.neighbors.on_heartbeat(from, at)
    }

    pub fn run_transformer(&mut self, spec: &TransformerSpec, input: &[SensorReading]) -> Result<Vec<u8>, NodeError> {
        self.transformers.run(spec, input, FieldSet::ALL).map(|p| payload_bytes(&p, FieldSet::ALL))
    }

    /// Broadcasts `rounds` heartbeats to every neighbour, one per interval,
    /// starting now. Zero rounds stops a running schedule.
    pub fn schedule_heartbeats(&mut self, rounds: u64, ctx: &mut Ctx<'_>) {
        let start = self.heartbeat_rounds == 0 && rounds > 0;
        self.heartbeat_rounds = rounds;
        if start {
            ctx.set_timer(0, HEARTBEAT_TICK);
        }
    }

    fn heartbeat(&mut self, ctx: &mut Ctx<'_>) {
        if self.heartbeat_rounds == 0 {
            return;
        }
        self.heartbeat_rounds -= 1;
        let me = ctx.me();
        for n in ctx.topology().node_neighbors(me) {
            let _ = ctx.send(MessageKind::Heartbeat, n, Codec::None, RequestId(0), Bytes::new());
        }
        if self.heartbeat_rounds > 0 {
            ctx.set_timer(self.config.heartbeat_interval_ms, HEARTBEAT_TICK);
        }
    }

    fn reply(&self, ctx: &mut Ctx<'_>, to: EndpointId, resp: &QueryResponse, fields: FieldSet) {
        let body = encode_response(resp, fields, Codec::Gzip);
        let _ = ctx.send(MessageKind::Response, to, Codec::Gzip, resp.request_id, body);
    }

    /// Entry point for QUERY envelopes from clients and other nodes.
    pub fn handle_request(&mut self, req: QueryRequest, origin: EndpointId, ctx: &mut Ctx<'_>) {
        let fields = req.fields().unwrap_or(FieldSet::ALL);
        let local = match answer_local(&self.store, &mut self.transformers, &req, Codec::Gzip) {
            Ok(r) => r,
            Err(e) => {
                self.reply(ctx, origin, &error_response(req.request_id, &e, Codec::Gzip), fields);
                return;
            }
        };
        match req.scope {
            Scope::Local => self.reply(ctx, origin, &local, fields),
            Scope::Mesh => {
                if self.gather.is_pending(req.request_id) {
                    let e = NodeError::Validation(ValidationError::new("request_id", "already in flight"));
                    self.reply(ctx, origin, &error_response(req.request_id, &e, Codec::Gzip), fields);
                    return;
                }
                let targets = self.neighbors.available(ctx.now());
                let forwarded = QueryRequest { scope: Scope::Local, ..req };
                self.gather.start(ctx, origin, &forwarded, fields, Some(local), &targets);
            }
        }
    }

    fn on_notify(&mut self, env: &Envelope, ctx: &mut Ctx<'_>) {
        let readings = match decode_json::<SensorReading>(&env.body) {
            Ok(r) => Vec::from([r]),
            Err(_) => decode_readings(&env.body).unwrap_or_default(),
        };
        let mut applied = 0;
        for r in readings {
            if let Ok(InsertOutcome::Inserted(_)) = self.store.insert(r) {
                applied += 1;
            }
        }
        self.notifications.push(Notification { from: env.sender, at: ctx.now(), body: env.body.clone(), applied });
        self.flush_changes(ctx);
    }
}

impl Actor for SyncMeshNode {
    fn on_envelope(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        match env.kind {
            MessageKind::Query => match decode_request(&env) {
                Ok(req) => self.handle_request(req, env.sender, ctx),
                Err(e) => {
                    self.rejected += 1;
                    let resp = error_response(env.request_id, &e.into(), Codec::Gzip);
                    self.reply(ctx, env.sender, &resp, FieldSet::ALL);
                }
            },
            MessageKind::Response => {
                if !self.gather.on_response(ctx, &env) {
                    self.rejected += 1;
                }
            }
            MessageKind::Heartbeat => {
                if self.on_heartbeat(env.sender, ctx.now()).is_err() {
                    self.rejected += 1;
                }
            }
            MessageKind::Subscribe => match decode_json::<SubscribeBody>(&env.body) {
                Ok(b) if self.neighbors.is_member(env.sender) => {
                    self.add_subscription(env.sender, b.filter);
                }
                _ => self.rejected += 1,
            },
            MessageKind::Notify => self.on_notify(&env, ctx),
            MessageKind::Ingest | MessageKind::Gossip | MessageKind::GossipEcho => self.rejected += 1,
        }
    }

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        if token == HEARTBEAT_TICK {
            self.heartbeat(ctx);
        } else {
            self.gather.on_timer(ctx, token);
        }
    }
}
