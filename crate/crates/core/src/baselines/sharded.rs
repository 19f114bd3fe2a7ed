//! Data stays on the nodes (one shard each); a router at the server endpoint
//! fans queries out to every shard and merges the answers.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::gather::{empty_payload, GatherEngine, GatherRecord};
use crate::model::{FieldSet, Millis, QueryRequest, QueryResponse, Scope, ValidationError};
use crate::netsim::{Actor, Ctx};
use crate::node::{answer_local, error_response, NodeError, TransformerRegistry};
use crate::protocol::{decode_request, encode_response};
use crate::store::LocalStore;
use crate::wire::{Codec, EndpointId, Envelope, MessageKind};

/// A node acting as one shard. Replies are FASTLZ-compressed; aggregation
/// requests are answered with shard-local summaries.
#[derive(Debug)]
pub struct Shard {
    store: LocalStore,
    transformers: TransformerRegistry,
    rejected: u64,
}

impl Shard {
    pub fn new(store: LocalStore) -> Self {
        Shard { store, transformers: TransformerRegistry::with_builtins(), rejected: 0 }
    }

    pub fn store(&self) -> &LocalStore {
        &self.store
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }
}

fn reply_fastlz(ctx: &mut Ctx<'_>, env: &Envelope, resp: &QueryResponse, fields: FieldSet) {
    let body = encode_response(resp, fields, Codec::Fastlz);
    let _ = ctx.send(MessageKind::Response, env.sender, Codec::Fastlz, resp.request_id, body);
}

impl Actor for Shard {
    fn on_envelope(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        if env.kind != MessageKind::Query {
            self.rejected += 1;
            return;
        }
        let (resp, fields) = match decode_request(&env) {
            Ok(req) => (
                answer_local(&self.store, &mut self.transformers, &req, Codec::Fastlz)
                    .unwrap_or_else(|e| error_response(req.request_id, &e, Codec::Fastlz)),
                req.fields().unwrap_or(FieldSet::ALL),
            ),
            Err(e) => (error_response(env.request_id, &e.into(), Codec::Fastlz), FieldSet::ALL),
        };
        reply_fastlz(ctx, &env, &resp, fields);
    }
}

/// Stateless router: holds no readings, only outstanding gathers.
#[derive(Debug)]
pub struct ShardRouter {
    shards: Vec<EndpointId>,
    gather: GatherEngine,
    rejected: u64,
}

impl ShardRouter {
    pub fn new(shards: Vec<EndpointId>, gather_timeout: Millis) -> Self {
        ShardRouter { shards, gather: GatherEngine::new(gather_timeout, Codec::Fastlz), rejected: 0 }
    }

    pub fn shards(&self) -> &[EndpointId] {
        &self.shards
    }

    pub fn gathers(&self) -> &[GatherRecord] {
        self.gather.history()
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    fn route(&mut self, req: QueryRequest, env: &Envelope, ctx: &mut Ctx<'_>) {
        let checked = crate::model::validate_request(&req).map_err(NodeError::from).and_then(|_| {
            if self.gather.is_pending(req.request_id) {
                Err(NodeError::Validation(ValidationError::new("request_id", "already in flight")))
            } else {
                Ok(())
            }
        });
        let fields = req.fields().unwrap_or(FieldSet::ALL);
        if let Err(e) = checked {
            reply_fastlz(ctx, env, &error_response(req.request_id, &e, Codec::Fastlz), fields);
            return;
        }
        if self.shards.is_empty() {
            // no shard can vouch for any data, so the empty answer is partial
            let resp = QueryResponse {
                request_id: req.request_id,
                payload: empty_payload(&req, fields),
                contributing_nodes: BTreeSet::new(),
                partial: true,
                codec: Codec::Fastlz,
            };
            reply_fastlz(ctx, env, &resp, fields);
            return;
        }
        let forwarded = QueryRequest { scope: Scope::Local, ..req };
        let shards = self.shards.clone();
        self.gather.start(ctx, env.sender, &forwarded, fields, None, &shards);
    }
}

impl Actor for ShardRouter {
    fn on_envelope(&mut self, env: Envelope, ctx: &mut Ctx<'_>) {
        match env.kind {
            MessageKind::Query => match decode_request(&env) {
                Ok(req) => self.route(req, &env, ctx),
                Err(e) => {
                    reply_fastlz(ctx, &env, &error_response(env.request_id, &e.into(), Codec::Fastlz), FieldSet::ALL)
                }
            },
            MessageKind::Response => {
                if !self.gather.on_response(ctx, &env) {
                    self.rejected += 1;
                }
            }
            _ => self.rejected += 1,
        }
    }

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        self.gather.on_timer(ctx, token);
    }
}
