//! Fully replicated peers: every write is pushed uncompressed to every other
//! peer, which echoes the batch back. Collisions resolve last-writer-wins.

use alloc::collections::btree_map::Entry;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::cmp::Ordering;

use bytes::Bytes;
use serde::Deserialize;

use crate::client::{issue, Outstanding};
use crate::model::{
    content_digest, merge_canonical, FieldSet, Millis, NodeId, QueryRequest, ReadingKey, SensorReading,
};
use crate::netsim::{Actor, Ctx, NetError, Simulation};
use crate::node::{answer_local, error_response, TransformerRegistry};
use crate::protocol::{decode_request, encode_response};
use crate::store::LocalStore;
use crate::wire::{encode_readings, Codec, EndpointId, Envelope, MessageKind};

use super::central::INGEST_LIMIT_MS;
use super::BATCH_SIZE;

/// Write version; the larger one wins. Equal versions fall back to the
/// larger canonical encoding so the outcome never depends on arrival order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Version {
    pub written_at: Millis,
    pub writer: EndpointId,
}

#[derive(Deserialize)]
struct GossipBody {
    written_at: Millis,
    readings: Vec<SensorReading>,
}

/// Parsed gossip bodies, shareable between the replicas of one simulation.
/// A batch reaches every peer as the same allocation, so it is parsed once;
/// entries keep their body alive, which keeps the address key unique.
/// Body address and length.
type BodyKey = (usize, usize);

#[derive(Default)]
pub struct DecodeCache {
    entries: BTreeMap<BodyKey, (Bytes, Option<Rc<GossipBody>>)>,
}

impl DecodeCache {
    pub fn shared() -> Rc<RefCell<DecodeCache>> {
        Rc::new(RefCell::new(DecodeCache::default()))
    }

    fn decode(&mut self, body: &Bytes) -> Option<Rc<GossipBody>> {
        let key = (body.as_ptr() as usize, body.len());
        self.entries
            .entry(key)
            .or_insert_with(|| (body.clone(), serde_json::from_slice(body).ok().map(Rc::new)))
            .1
            .clone()
    }
}

/// `{"written_at":t,"readings":[...]}` with every reading field present.
pub fn gossip_body(written_at: Millis, readings: &[SensorReading]) -> Bytes {
    let mut body = format!("{{\"written_at\":{written_at},\"readings\":").into_bytes();
    body.extend_from_slice(&encode_readings(readings, FieldSet::ALL));
    body.push(b'}');
    Bytes::from(body)
}

fn canonical_bytes(r: &SensorReading) -> Vec<u8> {
    serde_json::to_vec(r).expect("reading serialization is infallible")
}

pub struct Replica {
    store: LocalStore,
    cache: Rc<RefCell<DecodeCache>>,
    versions: BTreeMap<ReadingKey, Version>,
    transformers: TransformerRegistry,
    echoes: u64,
    rejected: u64,
}

impl core::fmt::Debug for Replica {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Replica").field("store", &self.store).finish_non_exhaustive()
    }
}

impl Replica {
    pub fn new(node_id: NodeId) -> Self {
        Replica::with_cache(node_id, DecodeCache::shared())
    }

    pub fn with_cache(node_id: NodeId, cache: Rc<RefCell<DecodeCache>>) -> Self {
        Replica {
            store: LocalStore::new(node_id),
            cache,
            versions: BTreeMap::new(),
            transformers: TransformerRegistry::with_builtins(),
            echoes: 0,
            rejected: 0,
        }
    }

    pub fn store(&self) -> &LocalStore {
        &self.store
    }

    pub fn version(&self, key: &ReadingKey) -> Option<Version> {
        self.versions.get(key).copied()
    }

    pub fn echoes(&self) -> u64 {
        self.echoes
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    /// Applies one replicated write. Returns whether the replica changed.
    pub fn apply(&mut self, reading: SensorReading, version: Version) -> bool {
        if reading.validate().is_err() {
            self.rejected += 1;
            return false;
        }
        let wins = match self.versions.entry(reading.key()) {
            Entry::Vacant(slot) => {
                slot.insert(version);
                true
            }
            Entry::Occupied(mut slot) => {
                let wins = match version.cmp(slot.get()) {
                    Ordering::Equal => {
                        self.store.get(slot.key()).is_none_or(|c| canonical_bytes(&reading) > canonical_bytes(c))
                    }
                    order => order == Ordering::Greater,
                };
                if wins {
                    slot.insert(version);
                }
                wins
            }
        };
        if wins {
            self.store.replace(reading).expect("validated above");
        }
        wins
    }

    /// Writes `readings` locally at the current instant and gossips them to
    /// every peer in batches. Returns the latest delivery time scheduled.
    pub fn write(&mut self, readings: &[SensorReading], ctx: &mut Ctx<'_>) -> Millis {
        let version = Version { written_at: ctx.now(), writer: ctx.me() };
        for r in readings {
            self.apply(r.clone(), version);
        }
        let peers = ctx.topology().node_neighbors(ctx.me());
        let mut last = ctx.now();
        for chunk in readings.chunks(BATCH_SIZE) {
            let body = gossip_body(version.written_at, chunk);
            for p in &peers {
                if let Ok(ev) = ctx.send(MessageKind::Gossip, *p, Codec::None, crate::model::RequestId(0), body.clone())
                {
                    last = last.max(ev.deliver_at);
                }
            }
        }
        last
    }

    /// Hash over every (reading, version) pair in key order.
    pub fn digest(&self) -> alloc::string::String {
        let mut buf = Vec::new();
        for (r, (_, v)) in self.store.iter().zip(&self.versions) {
            buf.extend_from_slice(&canonical_bytes(r));
            buf.extend_from_slice(format!(" {} {}\n", v.written_at, v.writer).as_bytes());
        }
        content_digest(&buf)
    }
}

impl Actor for Replica {
    fn on_envelope(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        match env.kind {
            MessageKind::Gossip => {
                let decoded = self.cache.borrow_mut().decode(&env.body);
                match decoded {
                    Some(g) => {
                        let version = Version { written_at: g.written_at, writer: env.sender };
                        for r in &g.readings {
                            self.apply(r.clone(), version);
                        }
                    }
                    None => self.rejected += 1,
                }
                let _ = ctx.send(MessageKind::GossipEcho, env.sender, Codec::None, env.request_id, env.body);
            }
            MessageKind::GossipEcho => self.echoes += 1,
            MessageKind::Query => {
                let (resp, fields) = match decode_request(&env) {
                    Ok(req) => (
                        answer_local(&self.store, &mut self.transformers, &req, Codec::None)
                            .unwrap_or_else(|e| error_response(req.request_id, &e, Codec::None)),
                        req.fields().unwrap_or(FieldSet::ALL),
                    ),
                    Err(e) => (error_response(env.request_id, &e.into(), Codec::None), FieldSet::ALL),
                };
                let body = encode_response(&resp, fields, Codec::None);
                let _ = ctx.send(MessageKind::Response, env.sender, Codec::None, resp.request_id, body);
            }
            _ => self.rejected += 1,
        }
    }
}

/// Each writer publishes its readings at the current instant; runs until
/// every gossip and echo is delivered. Returns the elapsed virtual time.
pub fn p2p_sync(sim: &mut Simulation, writes: &[(EndpointId, &[SensorReading])]) -> Result<Millis, NetError> {
    let t0 = sim.now();
    for (writer, readings) in writes {
        sim.with_actor::<Replica, _>(*writer, |r, ctx| r.write(readings, ctx))
            .ok_or(NetError::UnknownEndpoint(*writer))?;
    }
    let end = sim.run_until_quiescent(t0 + INGEST_LIMIT_MS)?;
    Ok(end - t0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct P2pCollect {
    /// Union of every answer, deduplicated by key.
    pub readings: Vec<SensorReading>,
    /// True only when no peer answered.
    pub partial: bool,
    pub outcome: Outstanding,
}

/// Queries every peer individually (uncompressed) and deduplicates client-side.
pub fn p2p_client_collect(
    sim: &mut Simulation,
    peers: &[EndpointId],
    req: &QueryRequest,
) -> Result<P2pCollect, NetError> {
    let outcome = issue(sim, peers, req)?;
    let parts: Vec<Vec<SensorReading>> =
        outcome.responses.values().filter_map(|(_, r)| r.payload.readings()).map(<[SensorReading]>::to_vec).collect();
    let readings = merge_canonical(parts);
    let answered = outcome.responses.values().any(|(_, r)| r.payload.readings().is_some());
    Ok(P2pCollect { readings, partial: !answered, outcome })
}
