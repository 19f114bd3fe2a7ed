//! One repetition of one system answering one client request over a fixed
//! partitioning of the data.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::baselines::p2p::{p2p_client_collect, p2p_sync, DecodeCache, Replica};
use crate::baselines::{central_ingest, CentralServer, Shard, ShardRouter};
use crate::client::{issue, Client, Outstanding, DEFAULT_CLIENT_TIMEOUT_MS};
use crate::gather::{empty_payload, GatherRecord};
use crate::model::{
    FieldSet, Millis, Payload, QueryRequest, RequestId, Scope, SensorReading, Summary, TimeRange, Timestamp,
    TransformerSpec,
};
use crate::netsim::{build_topology, NetError, SentEnvelope, Simulation, TrafficLedger};
use crate::node::{default_gather_timeout, NodeConfig, NodeError, SyncMeshNode, AGGREGATE_MEAN};
use crate::store::LocalStore;
use crate::wire::EndpointId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    #[serde(alias = "SYNCMESH")]
    Syncmesh,
    #[serde(alias = "CENTRAL")]
    Central,
    #[serde(alias = "SHARDED")]
    Sharded,
    #[serde(alias = "P2P")]
    P2p,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [SystemKind::Syncmesh, SystemKind::Central, SystemKind::Sharded, SystemKind::P2p];

    pub const fn name(self) -> &'static str {
        match self {
            SystemKind::Syncmesh => "syncmesh",
            SystemKind::Central => "central",
            SystemKind::Sharded => "sharded",
            SystemKind::P2p => "p2p",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        SystemKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }

    /// Whether the topology carries a server endpoint.
    pub const fn has_server(self) -> bool {
        matches!(self, SystemKind::Central | SystemKind::Sharded)
    }
}

impl core::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    #[serde(alias = "COLLECT")]
    Collect,
    #[serde(alias = "TRANSFORM")]
    Transform,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 2] = [ScenarioKind::Collect, ScenarioKind::Transform];

    pub const fn name(self) -> &'static str {
        match self {
            ScenarioKind::Collect => "collect",
            ScenarioKind::Transform => "transform",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        ScenarioKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

impl core::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub system: SystemKind,
    pub scenario: ScenarioKind,
    pub window_days: u64,
    /// Explicit request range; `None` uses the trailing window.
    pub range: Option<TimeRange>,
    /// Latency seed for this repetition.
    pub seed: u64,
    /// Access-link bandwidth per endpoint; `None` is unlimited.
    pub bandwidth_bytes_per_ms: Option<u64>,
    /// Template for every mesh node; `node_id` is overwritten per node.
    pub node: NodeConfig,
    /// Router timeout for the sharded system; `None` derives it like the mesh.
    pub router_timeout_ms: Option<Millis>,
    pub client_timeout_ms: Millis,
    /// Node indices marked unavailable after warm-up.
    pub down_nodes: Vec<usize>,
    /// Keep every envelope for inspection.
    pub capture: bool,
}

impl RunSpec {
    pub fn new(system: SystemKind, scenario: ScenarioKind, window_days: u64, seed: u64) -> Self {
        RunSpec {
            system,
            scenario,
            window_days,
            range: None,
            seed,
            bandwidth_bytes_per_ms: None,
            node: NodeConfig::new("node-0"),
            router_timeout_ms: None,
            client_timeout_ms: DEFAULT_CLIENT_TIMEOUT_MS,
            down_nodes: Vec::new(),
            capture: false,
        }
    }

    /// The client request for a dataset whose newest reading is at `last`.
    pub fn request(&self, last: Option<Timestamp>) -> QueryRequest {
        let range = match (self.range, last) {
            (Some(range), _) => range,
            (None, Some(last)) => TimeRange::trailing_days(last, self.window_days),
            (None, None) => TimeRange { start: Timestamp(0), end: Timestamp(1) },
        };
        let req = QueryRequest::collect(range, Scope::Mesh, RequestId(1));
        match self.scenario {
            ScenarioKind::Collect => req,
            ScenarioKind::Transform => req.with_transformer(TransformerSpec::new(AGGREGATE_MEAN)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("node index {0} out of range")]
    NoSuchNode(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub request: QueryRequest,
    /// Client-observed time from dispatch to the (last) response.
    pub request_time_ms: Millis,
    /// Time to move the data into place before the query; 0 when the system
    /// has no such phase.
    pub ingest_time_ms: Millis,
    pub warmup_ledger: TrafficLedger,
    pub ingest_ledger: TrafficLedger,
    pub query_ledger: TrafficLedger,
    pub partial: bool,
    pub payload: Payload,
    pub digest: String,
    /// Scatter-gathers run by the mesh coordinator or the shard router.
    pub gathers: Vec<GatherRecord>,
    pub outcome: Outstanding,
    pub captured: Vec<SentEnvelope>,
}

/// Newest timestamp across every partition.
pub fn dataset_end(partitions: &[LocalStore]) -> Option<Timestamp> {
    partitions.iter().filter_map(LocalStore::last_timestamp).max()
}

struct Phases {
    warmup: TrafficLedger,
    ingest: TrafficLedger,
    ingest_time: Millis,
}

pub fn run_repetition(spec: &RunSpec, partitions: &[LocalStore]) -> Result<RunReport, ExperimentError> {
    let n = partitions.len();
    if let Some(bad) = spec.down_nodes.iter().find(|i| **i >= n) {
        return Err(ExperimentError::NoSuchNode(*bad));
    }
    let topology = build_topology(n, spec.seed, spec.system.has_server());
    let nodes: Vec<EndpointId> = (0..n).map(EndpointId::node).collect();
    let mut sim = Simulation::new(topology).with_bandwidth(spec.bandwidth_bytes_per_ms);
    if spec.capture {
        sim.capture_envelopes();
    }
    sim.add_actor(EndpointId::client(), Client::new(spec.client_timeout_ms))?;
    let req = spec.request(dataset_end(partitions));
    let fields = req.fields().unwrap_or(FieldSet::ALL);

    let phases = match spec.system {
        SystemKind::Syncmesh => setup_mesh(spec, &mut sim, partitions, &nodes)?,
        SystemKind::Central => {
            sim.add_actor(EndpointId::server(), CentralServer::new())?;
            let readings: Vec<Vec<SensorReading>> = partitions.iter().map(|p| p.iter().cloned().collect()).collect();
            let sources: Vec<(EndpointId, &[SensorReading])> =
                nodes.iter().copied().zip(readings.iter().map(Vec::as_slice)).collect();
            let ingest_time = central_ingest(&mut sim, &sources)?;
            Phases { warmup: TrafficLedger::default(), ingest: sim.take_ledger(), ingest_time }
        }
        SystemKind::Sharded => {
            for (id, p) in nodes.iter().zip(partitions) {
                sim.add_actor(*id, Shard::new(p.fork()))?;
            }
            let timeout = spec.router_timeout_ms.unwrap_or_else(|| default_gather_timeout(sim.topology()));
            sim.add_actor(EndpointId::server(), ShardRouter::new(nodes.clone(), timeout))?;
            Phases { warmup: TrafficLedger::default(), ingest: TrafficLedger::default(), ingest_time: 0 }
        }
        SystemKind::P2p => {
            let cache = DecodeCache::shared();
            for (id, p) in nodes.iter().zip(partitions) {
                sim.add_actor(*id, Replica::with_cache(p.node_id().clone(), cache.clone()))?;
            }
            let readings: Vec<Vec<SensorReading>> = partitions.iter().map(|p| p.iter().cloned().collect()).collect();
            let writes: Vec<(EndpointId, &[SensorReading])> =
                nodes.iter().copied().zip(readings.iter().map(Vec::as_slice)).collect();
            let ingest_time = p2p_sync(&mut sim, &writes)?;
            Phases { warmup: TrafficLedger::default(), ingest: sim.take_ledger(), ingest_time }
        }
    };
    for i in &spec.down_nodes {
        sim.set_available(nodes[*i], false)?;
    }

    let (outcome, payload, partial) = match spec.system {
        SystemKind::Syncmesh | SystemKind::Central | SystemKind::Sharded => {
            let entry = if spec.system == SystemKind::Syncmesh { nodes[0] } else { EndpointId::server() };
            let outcome = issue(&mut sim, &[entry], &req)?;
            match outcome.response(entry) {
                Some(r) => (outcome.clone(), r.payload.clone(), r.partial),
                None => (outcome, empty_payload(&req, fields), true),
            }
        }
        SystemKind::P2p => {
            let collect = QueryRequest { transformer: None, scope: Scope::Local, ..req.clone() };
            let got = p2p_client_collect(&mut sim, &nodes, &collect)?;
            let payload = match spec.scenario {
                ScenarioKind::Collect => Payload::Readings(got.readings),
                ScenarioKind::Transform => Payload::Summary(Summary::over(&got.readings, fields)),
            };
            (got.outcome, payload, got.partial)
        }
    };

    let gathers = match spec.system {
        SystemKind::Syncmesh => sim.actor::<SyncMeshNode>(nodes[0]).map(|n| n.gathers().to_vec()),
        SystemKind::Sharded => sim.actor::<ShardRouter>(EndpointId::server()).map(|r| r.gathers().to_vec()),
        _ => None,
    }
    .unwrap_or_default();

    Ok(RunReport {
        digest: payload.digest(fields),
        request_time_ms: outcome.elapsed().unwrap_or(spec.client_timeout_ms),
        ingest_time_ms: phases.ingest_time,
        warmup_ledger: phases.warmup,
        ingest_ledger: phases.ingest,
        query_ledger: sim.ledger().clone(),
        partial,
        payload,
        gathers,
        outcome,
        captured: sim.captured().to_vec(),
        request: req,
    })
}

/// Builds mesh nodes and runs two heartbeat rounds so every node sees every
/// live neighbour as available when the query arrives.
fn setup_mesh(
    spec: &RunSpec,
    sim: &mut Simulation,
    partitions: &[LocalStore],
    nodes: &[EndpointId],
) -> Result<Phases, ExperimentError> {
    for (id, p) in nodes.iter().zip(partitions) {
        let mut config = spec.node.clone();
        config.node_id = id.as_str().into();
        let node = SyncMeshNode::new(config, p.fork(), sim.topology())?;
        sim.add_actor(*id, node)?;
    }
    for id in nodes {
        sim.with_actor::<SyncMeshNode, _>(*id, |n, ctx| n.schedule_heartbeats(2, ctx));
    }
    let limit = sim.now() + 2 * spec.node.heartbeat_interval_ms + crate::netsim::MAX_LATENCY_MS * 4 + 60_000;
    sim.run_until_quiescent(limit)?;
    Ok(Phases { warmup: sim.take_ledger(), ingest: TrafficLedger::default(), ingest_time: 0 })
}
