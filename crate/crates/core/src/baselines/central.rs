//! Every node ships its readings to one server, which answers all queries.

use alloc::vec::Vec;

use bytes::Bytes;

use super::batch_bodies;
use crate::model::{FieldSet, Millis, NodeId, SensorReading};
use crate::netsim::{Actor, Ctx, NetError, Simulation};
use crate::node::{answer_local, error_response, TransformerRegistry};
use crate::protocol::{decode_request, encode_response};
use crate::store::LocalStore;
use crate::wire::{decode_readings, Codec, EndpointId, Envelope, MessageKind};

/// Upper bound on virtual time a single ingest phase may take.
pub const INGEST_LIMIT_MS: Millis = 3_600_000;

#[derive(Debug)]
pub struct CentralServer {
    store: LocalStore,
    transformers: TransformerRegistry,
    rejected: u64,
}

impl Default for CentralServer {
    fn default() -> Self {
        CentralServer::new()
    }
}

impl CentralServer {
    pub fn new() -> Self {
        CentralServer {
            store: LocalStore::new(NodeId::new(EndpointId::server().as_str())),
            transformers: TransformerRegistry::with_builtins(),
            rejected: 0,
        }
    }

    pub fn store(&self) -> &LocalStore {
        &self.store
    }

    /// Readings or envelopes that could not be accepted.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }
}

impl Actor for CentralServer {
    fn on_envelope(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        match env.kind {
            MessageKind::Ingest => match env.decoded_body().and_then(|b| decode_readings(&b)) {
                Ok(readings) => {
                    for r in readings {
                        if self.store.insert(r).is_err() {
                            self.rejected += 1;
                        }
                    }
                }
                Err(_) => self.rejected += 1,
            },
            MessageKind::Query => {
                let (resp, fields) = match decode_request(&env) {
                    Ok(req) => {
                        let fields = req.fields().unwrap_or(FieldSet::ALL);
                        let resp = answer_local(&self.store, &mut self.transformers, &req, Codec::Fastlz)
                            .unwrap_or_else(|e| error_response(req.request_id, &e, Codec::Fastlz));
                        (resp, fields)
                    }
                    Err(e) => (error_response(env.request_id, &e.into(), Codec::Fastlz), FieldSet::ALL),
                };
                let body = encode_response(&resp, fields, Codec::Fastlz);
                let _ = ctx.send(MessageKind::Response, env.sender, Codec::Fastlz, resp.request_id, body);
            }
            _ => self.rejected += 1,
        }
    }
}

/// Sends every body from its source to `to` at the current instant and runs
/// the simulation to quiescence. Returns the time from the first send to the
/// last delivery (0 when there is nothing to send).
pub fn send_all(
    sim: &mut Simulation,
    kind: MessageKind,
    codec: Codec,
    to: EndpointId,
    sources: &[(EndpointId, Vec<Bytes>)],
) -> Result<Millis, NetError> {
    let t0 = sim.now();
    let mut last = t0;
    for (from, bodies) in sources {
        for body in bodies {
            let env = Envelope {
                kind,
                codec,
                sender: *from,
                receiver: to,
                request_id: crate::model::RequestId(0),
                body: body.clone(),
            };
            last = last.max(sim.send(env, t0)?.deliver_at);
        }
    }
    sim.run_until_quiescent(t0 + INGEST_LIMIT_MS)?;
    Ok(last - t0)
}

/// Streams each node's readings to the server as FASTLZ-compressed INGEST
/// batches. Returns the ingest duration.
pub fn central_ingest(sim: &mut Simulation, sources: &[(EndpointId, &[SensorReading])]) -> Result<Millis, NetError> {
    let bodies: Vec<(EndpointId, Vec<Bytes>)> =
        sources.iter().map(|(from, readings)| (*from, batch_bodies(readings, Codec::Fastlz))).collect();
    send_all(sim, MessageKind::Ingest, Codec::Fastlz, EndpointId::server(), &bodies)
}
