//! Client endpoint: sends queries and records what comes back.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use bytes::Bytes;

use crate::model::{Millis, QueryRequest, QueryResponse, RequestId};
use crate::netsim::{Actor, Ctx, NetError};
use crate::protocol::{decode_response, encode_request};
use crate::wire::{Codec, EndpointId, Envelope, MessageKind, WireError};

/// Default client-side timeout, generous enough for any scenario.
pub const DEFAULT_CLIENT_TIMEOUT_MS: Millis = 600_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Outstanding {
    pub targets: BTreeSet<EndpointId>,
    pub sent_at: Millis,
    pub responses: BTreeMap<EndpointId, (Millis, QueryResponse)>,
    pub errors: BTreeMap<EndpointId, WireError>,
    /// Targets that had not answered when the timeout fired.
    pub timed_out: BTreeSet<EndpointId>,
    pub completed_at: Option<Millis>,
}

impl Outstanding {
    pub fn is_complete(&self) -> bool {
        self.completed_at.is_some()
    }

    /// Time from dispatch to the last answer (or the timeout).
    pub fn elapsed(&self) -> Option<Millis> {
        self.completed_at.map(|t| t - self.sent_at)
    }

    pub fn response(&self, from: EndpointId) -> Option<&QueryResponse> {
        self.responses.get(&from).map(|(_, r)| r)
    }
}

#[derive(Debug)]
pub struct Client {
    timeout: Millis,
    requests: BTreeMap<RequestId, Outstanding>,
    timers: BTreeMap<u64, RequestId>,
    next_token: u64,
    unexpected: u64,
}

impl Default for Client {
    fn default() -> Self {
        Client::new(DEFAULT_CLIENT_TIMEOUT_MS)
    }
}

impl Client {
    pub fn new(timeout: Millis) -> Self {
        Client { timeout, requests: BTreeMap::new(), timers: BTreeMap::new(), next_token: 0, unexpected: 0 }
    }

    /// Sends `req` uncompressed to every target at the current instant.
    pub fn request(&mut self, ctx: &mut Ctx<'_>, targets: &[EndpointId], req: &QueryRequest) -> Result<(), NetError> {
        let body = Bytes::from(encode_request(req));
        for t in targets {
            ctx.send(MessageKind::Query, *t, Codec::None, req.request_id, body.clone())?;
        }
        let token = self.next_token;
        self.next_token += 1;
        self.timers.insert(token, req.request_id);
        ctx.set_timer(self.timeout, token);
        self.requests.insert(
            req.request_id,
            Outstanding {
                targets: targets.iter().copied().collect(),
                sent_at: ctx.now(),
                responses: BTreeMap::new(),
                errors: BTreeMap::new(),
                timed_out: BTreeSet::new(),
                completed_at: None,
            },
        );
        Ok(())
    }

    pub fn outcome(&self, id: RequestId) -> Option<&Outstanding> {
        self.requests.get(&id)
    }

    /// Responses that matched no outstanding request.
    pub fn unexpected(&self) -> u64 {
        self.unexpected
    }

    fn settle(o: &mut Outstanding, now: Millis) {
        if o.completed_at.is_none() && o.responses.len() + o.errors.len() == o.targets.len() {
            o.completed_at = Some(now);
        }
    }
}

impl Actor for Client {
    fn on_envelope(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        let now = ctx.now();
        let o = match self.requests.get_mut(&env.request_id) {
            Some(o)
                if env.kind == MessageKind::Response && o.completed_at.is_none() && o.targets.contains(&env.sender) =>
            {
                o
            }
            _ => {
                self.unexpected += 1;
                return;
            }
        };
        match decode_response(&env) {
            Ok(r) => {
                o.responses.insert(env.sender, (now, r));
            }
            Err(e) => {
                o.errors.insert(env.sender, e);
            }
        }
        Client::settle(o, now);
    }

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        let Some(id) = self.timers.remove(&token) else { return };
        let Some(o) = self.requests.get_mut(&id) else { return };
        if o.completed_at.is_none() {
            o.timed_out = o
                .targets
                .iter()
                .filter(|t| !o.responses.contains_key(*t) && !o.errors.contains_key(*t))
                .copied()
                .collect();
            o.completed_at = Some(ctx.now());
        }
    }
}

impl Client {
    /// Answers in endpoint order, without the transport timestamps.
    pub fn responses(&self, id: RequestId) -> Vec<&QueryResponse> {
        self.requests.get(&id).map(|o| o.responses.values().map(|(_, r)| r).collect()).unwrap_or_default()
    }
}

/// Sends `req` from the client actor at [`EndpointId::client`] to `targets`
/// and steps the simulation until every target answered or the client timed
/// out. Events scheduled after that point stay queued.
pub fn issue(
    sim: &mut crate::netsim::Simulation,
    targets: &[EndpointId],
    req: &QueryRequest,
) -> Result<Outstanding, NetError> {
    let client = EndpointId::client();
    sim.with_actor::<Client, _>(client, |c, ctx| c.request(ctx, targets, req))
        .ok_or(NetError::UnknownEndpoint(client))??;
    loop {
        let done = sim.actor::<Client>(client).and_then(|c| c.outcome(req.request_id)).filter(|o| o.is_complete());
        if let Some(o) = done {
            return Ok(o.clone());
        }
        if sim.step().is_none() {
            // only reachable if the client's own timer was lost
            let o = sim.actor::<Client>(client).and_then(|c| c.outcome(req.request_id)).cloned();
            return o.ok_or(NetError::UnknownEndpoint(client));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FieldSet;
    use crate::model::{NodeId, Payload, Scope, TimeRange};
    use crate::netsim::{EndpointKind, Simulation, Topology};
    use crate::protocol::encode_response;

    /// Answers every query with an empty response, or garbage when `broken`.
    struct Echo {
        broken: bool,
    }

    impl Actor for Echo {
        fn on_envelope(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
            let body = if self.broken {
                b"{".to_vec()
            } else {
                let resp = QueryResponse {
                    request_id: env.request_id,
                    payload: Payload::Readings(Vec::new()),
                    contributing_nodes: BTreeSet::from([NodeId::new(ctx.me().as_str())]),
                    partial: false,
                    codec: Codec::None,
                };
                encode_response(&resp, FieldSet::ALL, Codec::None)
            };
            let _ = ctx.send(MessageKind::Response, env.sender, Codec::None, env.request_id, body);
        }
    }

    fn sim(latencies: &[Millis], timeout: Millis) -> Simulation {
        let mut t = Topology::new();
        t.add_endpoint(EndpointId::client(), EndpointKind::Client).unwrap();
        for (i, l) in latencies.iter().enumerate() {
            t.add_endpoint(EndpointId::node(i), EndpointKind::Node).unwrap();
            t.connect(EndpointId::client(), EndpointId::node(i), *l).unwrap();
        }
        let mut sim = Simulation::new(t);
        sim.add_actor(EndpointId::client(), Client::new(timeout)).unwrap();
        sim
    }

    fn req(id: u128) -> QueryRequest {
        QueryRequest::collect(TimeRange::new(1, 2).unwrap(), Scope::Local, RequestId(id))
    }

    #[test]
    fn completes_with_the_last_answer() {
        let mut s = sim(&[10, 30], 1000);
        for i in 0..2 {
            s.add_actor(EndpointId::node(i), Echo { broken: false }).unwrap();
        }
        let out = issue(&mut s, &[EndpointId::node(0), EndpointId::node(1)], &req(1)).unwrap();
        assert_eq!(out.elapsed(), Some(60));
        assert_eq!(out.responses.len(), 2);
        assert!(out.timed_out.is_empty());
    }

    #[test]
    fn silent_target_times_out() {
        let mut s = sim(&[10, 30], 500);
        s.add_actor(EndpointId::node(0), Echo { broken: false }).unwrap();
        s.set_available(EndpointId::node(1), false).unwrap();
        let out = issue(&mut s, &[EndpointId::node(0), EndpointId::node(1)], &req(1)).unwrap();
        assert_eq!(out.elapsed(), Some(500));
        assert_eq!(out.timed_out, BTreeSet::from([EndpointId::node(1)]));
        assert!(out.response(EndpointId::node(0)).is_some());
    }

    #[test]
    fn undecodable_answer_counts_as_an_error() {
        let mut s = sim(&[10], 500);
        s.add_actor(EndpointId::node(0), Echo { broken: true }).unwrap();
        let out = issue(&mut s, &[EndpointId::node(0)], &req(1)).unwrap();
        assert_eq!(out.elapsed(), Some(20));
        assert!(out.errors.contains_key(&EndpointId::node(0)));
    }

    #[test]
    fn stray_responses_are_counted() {
        let mut s = sim(&[10], 500);
        let body = encode_response(
            &QueryResponse {
                request_id: RequestId(77),
                payload: Payload::Readings(Vec::new()),
                contributing_nodes: BTreeSet::new(),
                partial: false,
                codec: Codec::None,
            },
            FieldSet::ALL,
            Codec::None,
        );
        let env = Envelope {
            kind: MessageKind::Response,
            codec: Codec::None,
            sender: EndpointId::node(0),
            receiver: EndpointId::client(),
            request_id: RequestId(77),
            body: body.into(),
        };
        s.send(env, 0).unwrap();
        s.run_until_quiescent(1000).unwrap();
        assert_eq!(s.actor::<Client>(EndpointId::client()).unwrap().unexpected(), 1);
    }
}
