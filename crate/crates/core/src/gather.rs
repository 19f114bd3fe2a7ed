//! Scatter-gather bookkeeping shared by the mesh coordinator and the sharded
//! router: fan a request out, collect replies until all arrive or the timeout
//! fires, then merge and answer the origin.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::model::{
    merge_canonical, ErrorBody, FieldSet, Millis, NodeId, Payload, QueryRequest, QueryResponse, RequestId,
    SensorReading, Summary,
};
use crate::netsim::Ctx;
use crate::protocol::{decode_response, encode_request, encode_response};
use crate::wire::{Codec, EndpointId, Envelope, MessageKind};

/// What happened to one scatter-gather, for inspection after the fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherRecord {
    pub request_id: RequestId,
    pub started_at: Millis,
    pub completed_at: Millis,
    pub contacted: BTreeSet<EndpointId>,
    pub responded: BTreeSet<EndpointId>,
    pub timed_out: BTreeSet<EndpointId>,
    /// Replied with an error payload or an undecodable body.
    pub failed: BTreeSet<EndpointId>,
}

#[derive(Debug)]
struct Pending {
    origin: EndpointId,
    request_id: RequestId,
    fields: FieldSet,
    empty: Payload,
    started_at: Millis,
    local: Option<QueryResponse>,
    awaiting: BTreeSet<EndpointId>,
    contacted: BTreeSet<EndpointId>,
    responses: BTreeMap<EndpointId, QueryResponse>,
    failed: BTreeSet<EndpointId>,
    token: u64,
}

/// Outstanding gathers keyed by request id.
#[derive(Debug)]
pub struct GatherEngine {
    timeout: Millis,
    codec: Codec,
    pending: BTreeMap<RequestId, Pending>,
    timers: BTreeMap<u64, RequestId>,
    next_token: u64,
    history: Vec<GatherRecord>,
}

/// Payload returned when nothing contributed.
pub fn empty_payload(req: &QueryRequest, fields: FieldSet) -> Payload {
    match &req.transformer {
        Some(t) if t.name == crate::node::AGGREGATE_MEAN => {
            Payload::Summary(Summary::over(core::iter::empty(), fields))
        }
        _ => Payload::Readings(Vec::new()),
    }
}

/// Merges partial payloads: readings are unioned in canonical order, summaries
/// combined through (count, sum, min, max). Parts are taken in the given order.
pub fn merge_payloads(parts: impl IntoIterator<Item = Payload>, empty: Payload) -> Payload {
    let mut readings: Vec<Vec<SensorReading>> = Vec::new();
    let mut merged: Option<Payload> = None;
    for part in parts {
        merged = Some(match (merged, part) {
            (None, Payload::Readings(r)) | (Some(Payload::Readings(_)), Payload::Readings(r)) => {
                readings.push(r);
                Payload::Readings(Vec::new())
            }
            (None, p) => p,
            (Some(Payload::Summary(mut acc)), Payload::Summary(s)) => {
                acc.merge(&s);
                Payload::Summary(acc)
            }
            (Some(err @ Payload::Error(_)), _) => err,
            (Some(_), _) => {
                Payload::Error(ErrorBody { code: "merge".into(), message: "partial results of different kinds".into() })
            }
        });
    }
    match merged.unwrap_or(empty) {
        Payload::Readings(mut r) => {
            readings.push(core::mem::take(&mut r));
            Payload::Readings(merge_canonical(readings))
        }
        other => other,
    }
}

impl GatherEngine {
    /// `codec` is applied to the merged response sent back to the origin.
    pub fn new(timeout: Millis, codec: Codec) -> Self {
        GatherEngine {
            timeout,
            codec,
            pending: BTreeMap::new(),
            timers: BTreeMap::new(),
            next_token: 0,
            history: Vec::new(),
        }
    }

    pub fn timeout(&self) -> Millis {
        self.timeout
    }

    pub fn history(&self) -> &[GatherRecord] {
        &self.history
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    pub fn is_pending(&self, id: RequestId) -> bool {
        self.pending.contains_key(&id)
    }

    /// Sends `forwarded` to every target at the current instant and arms the
    /// timeout. With no targets the origin is answered immediately.
    pub fn start(
        &mut self,
        ctx: &mut Ctx<'_>,
        origin: EndpointId,
        forwarded: &QueryRequest,
        fields: FieldSet,
        local: Option<QueryResponse>,
        targets: &[EndpointId],
    ) {
        let token = self.next_token;
        self.next_token += 1;
        let mut pending = Pending {
            origin,
            request_id: forwarded.request_id,
            fields,
            empty: empty_payload(forwarded, fields),
            started_at: ctx.now(),
            local,
            awaiting: BTreeSet::new(),
            contacted: BTreeSet::new(),
            responses: BTreeMap::new(),
            failed: BTreeSet::new(),
            token,
        };
        let body = bytes::Bytes::from(encode_request(forwarded));
        for target in targets {
            // a missing link is treated like a silent neighbour: it times out
            let _ = ctx.send(MessageKind::Query, *target, Codec::None, forwarded.request_id, body.clone());
            pending.contacted.insert(*target);
            pending.awaiting.insert(*target);
        }
        if pending.awaiting.is_empty() {
            self.finish(ctx, pending);
            return;
        }
        self.timers.insert(token, forwarded.request_id);
        self.pending.insert(forwarded.request_id, pending);
        ctx.set_timer(self.timeout, token);
    }

    /// Consumes a RESPONSE envelope if it belongs to an outstanding gather.
    pub fn on_response(&mut self, ctx: &mut Ctx<'_>, env: &Envelope) -> bool {
        let Some(p) = self.pending.get_mut(&env.request_id) else {
            return false;
        };
        if !p.awaiting.remove(&env.sender) {
            return false;
        }
        match decode_response(env) {
            Ok(resp) if !matches!(resp.payload, Payload::Error(_)) => {
                p.responses.insert(env.sender, resp);
            }
            _ => {
                p.failed.insert(env.sender);
            }
        }
        if p.awaiting.is_empty() {
            let p = self.pending.remove(&env.request_id).unwrap();
            self.timers.remove(&p.token);
            self.finish(ctx, p);
        }
        true
    }

    /// Handles a timeout token; returns false for tokens it does not own.
    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) -> bool {
        let Some(id) = self.timers.remove(&token) else {
            return false;
        };
        if let Some(p) = self.pending.remove(&id) {
            self.finish(ctx, p);
        }
        true
    }

    fn finish(&mut self, ctx: &mut Ctx<'_>, p: Pending) {
        let contributing: BTreeSet<NodeId> =
            p.local.iter().chain(p.responses.values()).flat_map(|r| r.contributing_nodes.iter().cloned()).collect();
        let responded: BTreeSet<EndpointId> = p.responses.keys().copied().collect();
        // merge in endpoint order so float sums do not depend on arrival order
        let parts = p.local.into_iter().chain(p.responses.into_values()).map(|r| r.payload);
        let payload = merge_payloads(parts, p.empty);
        let partial = !p.awaiting.is_empty() || !p.failed.is_empty();
        let response = QueryResponse {
            request_id: p.request_id,
            payload,
            contributing_nodes: contributing,
            partial,
            codec: self.codec,
        };
        let body = encode_response(&response, p.fields, self.codec);
        let _ = ctx.send(MessageKind::Response, p.origin, self.codec, p.request_id, body);
        self.history.push(GatherRecord {
            request_id: p.request_id,
            started_at: p.started_at,
            completed_at: ctx.now(),
            contacted: p.contacted,
            responded,
            timed_out: p.awaiting,
            failed: p.failed,
        });
    }
}
