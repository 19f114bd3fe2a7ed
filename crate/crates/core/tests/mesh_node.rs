use std::collections::BTreeSet;

use syncmesh_core::client::{issue, Client, DEFAULT_CLIENT_TIMEOUT_MS};
use syncmesh_core::model::{
    Field, FieldSet, Geo, Millis, NodeId, Payload, QueryRequest, RequestId, Scope, SensorId, SensorReading, TimeRange,
    Timestamp, TransformerSpec,
};
use syncmesh_core::netsim::{EndpointKind, LinkClass, Simulation, Topology};
use syncmesh_core::node::{NodeConfig, SyncMeshNode, AGGREGATE_MEAN};
use syncmesh_core::protocol::carries_readings;
use syncmesh_core::store::LocalStore;
use syncmesh_core::wire::{EndpointId, MessageKind};

fn node(i: usize) -> EndpointId {
    EndpointId::node(i)
}

fn reading(node: usize, sensor: &str, ts: u64, temp: f64) -> SensorReading {
    SensorReading {
        node_id: NodeId::new(EndpointId::node(node).as_str()),
        sensor_id: SensorId::new(sensor),
        timestamp: Timestamp(ts),
        geo: Some(Geo { lat: 42.7, lon: 23.3 }),
        p1: Some(10.0 + ts as f64),
        p2: Some(5.0),
        temperature: Some(temp),
        humidity: Some(50.0),
        pressure: None,
    }
}

fn store(i: usize, readings: impl IntoIterator<Item = SensorReading>) -> LocalStore {
    LocalStore::with_readings(NodeId::new(node(i).as_str()), readings).unwrap()
}

/// Client plus fully meshed nodes, `latency(a, b)` per node pair and 10 ms
/// from the client to every node.
fn mesh(stores: Vec<LocalStore>, latency: impl Fn(usize, usize) -> Millis) -> Simulation {
    let n = stores.len();
    let mut t = Topology::new();
    t.add_endpoint(EndpointId::client(), EndpointKind::Client).unwrap();
    for i in 0..n {
        t.add_endpoint(node(i), EndpointKind::Node).unwrap();
        t.connect(EndpointId::client(), node(i), 10).unwrap();
        for j in 0..i {
            t.connect(node(j), node(i), latency(j, i)).unwrap();
        }
    }
    let mut sim = Simulation::new(t);
    sim.capture_envelopes();
    sim.add_actor(EndpointId::client(), Client::default()).unwrap();
    for (i, s) in stores.into_iter().enumerate() {
        let cfg = NodeConfig::new(node(i).as_str());
        let actor = SyncMeshNode::new(cfg, s, sim.topology()).unwrap();
        sim.add_actor(node(i), actor).unwrap();
    }
    sim
}

/// Tells node 0 it just heard from each of `from`.
fn heard(sim: &mut Simulation, from: &[usize]) {
    for f in from {
        sim.with_actor::<SyncMeshNode, _>(node(0), |n, ctx| n.on_heartbeat(node(*f), ctx.now()).unwrap());
    }
}

/// Past the client's own timeout timer.
const DRAIN: Millis = 2 * DEFAULT_CLIENT_TIMEOUT_MS;

fn full_range() -> TimeRange {
    TimeRange::new(1, 1_000_000).unwrap()
}

fn mesh_collect() -> QueryRequest {
    QueryRequest::collect(full_range(), Scope::Mesh, RequestId(1))
}

fn sorted(mut rs: Vec<SensorReading>) -> Vec<SensorReading> {
    rs.sort_by(|a, b| {
        (a.timestamp, a.sensor_id.as_str(), a.node_id.as_str()).cmp(&(
            b.timestamp,
            b.sensor_id.as_str(),
            b.node_id.as_str(),
        ))
    });
    rs
}

fn sent(sim: &Simulation, kind: MessageKind) -> Vec<(EndpointId, EndpointId, Millis)> {
    sim.captured()
        .iter()
        .filter(|s| s.envelope.kind == kind)
        .map(|s| (s.envelope.sender, s.envelope.receiver, s.sent_at))
        .collect()
}

fn three_disjoint() -> Vec<Vec<SensorReading>> {
    (0..3)
        .map(|i| (0..20).map(|k| reading(i, &format!("s{i}"), 1000 + 37 * k + i as u64, k as f64)).collect())
        .collect()
}

#[test]
fn mesh_collect_returns_the_union_of_all_stores() {
    let data = three_disjoint();
    let mut sim = mesh(data.iter().enumerate().map(|(i, d)| store(i, d.clone())).collect(), |_, _| 40);
    heard(&mut sim, &[1, 2]);
    let out = issue(&mut sim, &[node(0)], &mesh_collect()).unwrap();
    let resp = out.response(node(0)).unwrap();
    let oracle = sorted(data.concat());
    assert_eq!(resp.payload.readings().unwrap(), oracle.as_slice());
    assert!(!resp.partial);
    assert_eq!(resp.contributing_nodes.len(), 3);
}

#[test]
fn mesh_mean_is_exact_over_counts() {
    // equal counts: {10}, {20}, {30}
    let stores = vec![
        store(0, [reading(0, "a", 5, 10.0)]),
        store(1, [reading(1, "b", 6, 20.0)]),
        store(2, [reading(2, "c", 7, 30.0)]),
    ];
    let mut sim = mesh(stores, |_, _| 25);
    heard(&mut sim, &[1, 2]);
    let req = mesh_collect()
        .with_transformer(TransformerSpec::new(AGGREGATE_MEAN))
        .with_projection(FieldSet::of([Field::Temperature]));
    let out = issue(&mut sim, &[node(0)], &req).unwrap();
    let t = *out.response(node(0)).unwrap().payload.summary().unwrap().get(Field::Temperature).unwrap();
    assert_eq!((t.count, t.mean()), (3, Some(20.0)));

    // unequal counts: a mean of means would give 30
    let stores = vec![
        store(0, [reading(0, "a", 5, 10.0), reading(0, "a", 6, 10.0)]),
        store(1, [reading(1, "b", 6, 20.0)]),
        store(2, [reading(2, "c", 7, 60.0)]),
    ];
    let mut sim = mesh(stores, |_, _| 25);
    heard(&mut sim, &[1, 2]);
    let out = issue(&mut sim, &[node(0)], &req).unwrap();
    let t = *out.response(node(0)).unwrap().payload.summary().unwrap().get(Field::Temperature).unwrap();
    assert_eq!((t.count, t.mean()), (4, Some(25.0)));
}

#[test]
fn local_query_on_an_empty_store() {
    let mut sim = mesh(vec![store(0, []), store(1, [reading(1, "b", 5, 1.0)])], |_, _| 30);
    heard(&mut sim, &[1]);
    let req = QueryRequest::collect(full_range(), Scope::Local, RequestId(4));
    let out = issue(&mut sim, &[node(0)], &req).unwrap();
    let resp = out.response(node(0)).unwrap();
    assert_eq!(resp.payload, Payload::Readings(vec![]));
    assert!(!resp.partial);
    assert_eq!(resp.contributing_nodes, BTreeSet::from([NodeId::new("node-0")]));
    assert!(sent(&sim, MessageKind::Query).iter().all(|(_, to, _)| *to == node(0)));
}

#[test]
fn gather_completes_after_the_slowest_round_trip() {
    let lat = |a: usize, b: usize| match (a, b) {
        (0, 1) => 50,
        (0, 2) => 100,
        _ => 20,
    };
    let mut sim = mesh((0..3).map(|i| store(i, [])).collect(), lat);
    heard(&mut sim, &[1, 2]);
    sim.with_actor::<SyncMeshNode, _>(node(0), |n, ctx| n.handle_request(mesh_collect(), EndpointId::client(), ctx));
    sim.run_until_quiescent(10_000).unwrap();
    let g = &sim.actor::<SyncMeshNode>(node(0)).unwrap().gathers()[0];
    assert_eq!(g.completed_at - g.started_at, 200);
    assert!(g.timed_out.is_empty());
}

#[test]
fn unavailable_neighbour_is_never_contacted() {
    let mut sim = mesh((0..3).map(|i| store(i, [reading(i, "s", 10 + i as u64, 1.0)])).collect(), |_, _| 40);
    // node 2 never heartbeats
    heard(&mut sim, &[1]);
    let out = issue(&mut sim, &[node(0)], &mesh_collect()).unwrap();
    let forwarded: Vec<_> =
        sent(&sim, MessageKind::Query).into_iter().filter(|(from, _, _)| *from == node(0)).collect();
    assert_eq!(forwarded.len(), 1);
    assert_eq!(forwarded[0].1, node(1));
    let g = &sim.actor::<SyncMeshNode>(node(0)).unwrap().gathers()[0];
    assert!(!g.responded.contains(&node(2)) && !g.timed_out.contains(&node(2)));
    let resp = out.response(node(0)).unwrap();
    assert!(!resp.partial);
    assert_eq!(resp.payload.readings().unwrap().len(), 2);
}

#[test]
fn silent_neighbour_times_out_at_dispatch_plus_timeout() {
    let mut sim = mesh((0..3).map(|i| store(i, [reading(i, "s", 10 + i as u64, 1.0)])).collect(), |_, _| 40);
    heard(&mut sim, &[1, 2]);
    sim.set_available(node(2), false).unwrap();
    let timeout = sim.actor::<SyncMeshNode>(node(0)).unwrap().gather_timeout();
    assert_eq!(timeout, 2 * 40 + 100);
    let out = issue(&mut sim, &[node(0)], &mesh_collect()).unwrap();
    let g = sim.actor::<SyncMeshNode>(node(0)).unwrap().gathers()[0].clone();
    assert_eq!(g.timed_out, BTreeSet::from([node(2)]));
    assert_eq!(g.completed_at, g.started_at + timeout);
    let resp = out.response(node(0)).unwrap();
    assert!(resp.partial);
    assert!(!resp.contributing_nodes.contains(&NodeId::new("node-2")));
    assert_eq!(resp.payload.readings().unwrap().len(), 2);
}

fn contacted_after(gap: Millis) -> bool {
    let mut sim = mesh(vec![store(0, []), store(1, [])], |_, _| 30);
    heard(&mut sim, &[1]);
    sim.schedule_timer(EndpointId::client(), gap, 77);
    sim.run_until_quiescent(gap).unwrap();
    assert_eq!(sim.now(), gap);
    sim.with_actor::<SyncMeshNode, _>(node(0), |n, ctx| n.handle_request(mesh_collect(), EndpointId::client(), ctx));
    sent(&sim, MessageKind::Query).iter().any(|(from, to, _)| *from == node(0) && *to == node(1))
}

#[test]
fn heartbeat_timeout_boundary_is_inclusive() {
    assert!(contacted_after(2999));
    assert!(contacted_after(3000));
    assert!(!contacted_after(3001));
}

#[test]
fn heartbeats_keep_neighbours_available() {
    let mut sim = mesh((0..3).map(|i| store(i, [])).collect(), |_, _| 60);
    for i in 0..3 {
        sim.with_actor::<SyncMeshNode, _>(node(i), |n, ctx| n.schedule_heartbeats(3, ctx));
    }
    sim.run_until_quiescent(60_000).unwrap();
    let n0 = sim.actor::<SyncMeshNode>(node(0)).unwrap();
    assert_eq!(n0.neighbors().available(sim.now()), vec![node(1), node(2)]);
    // 3 rounds, 3 nodes, 2 neighbours each
    assert_eq!(sim.ledger().get(LinkClass::NodeNode, MessageKind::Heartbeat), 3 * 3 * 2 * 64);
}

#[test]
fn without_clients_node_traffic_is_heartbeats_only() {
    let data = three_disjoint();
    let mut sim = mesh(data.iter().enumerate().map(|(i, d)| store(i, d.clone())).collect(), |_, _| 60);
    for i in 0..3 {
        sim.with_actor::<SyncMeshNode, _>(node(i), |n, ctx| n.schedule_heartbeats(5, ctx));
    }
    sim.run_until_quiescent(60_000).unwrap();
    assert_eq!(sim.ledger().kinds_on(LinkClass::NodeNode), BTreeSet::from([MessageKind::Heartbeat]));
    assert_eq!(sim.ledger().class_total(LinkClass::ClientNode), 0);
}

#[test]
fn transform_keeps_readings_on_their_nodes() {
    let data = three_disjoint();
    let mut sim = mesh(data.iter().enumerate().map(|(i, d)| store(i, d.clone())).collect(), |_, _| 60);
    heard(&mut sim, &[1, 2]);
    let req = mesh_collect().with_transformer(TransformerSpec::new(AGGREGATE_MEAN));
    issue(&mut sim, &[node(0)], &req).unwrap();
    sim.run_until_quiescent(DRAIN).unwrap();
    assert!(!sim.captured().is_empty());
    for s in sim.captured() {
        assert!(!carries_readings(&s.envelope).unwrap(), "{:?}", s.envelope.kind);
    }
}

#[test]
fn one_request_fans_out_once_to_each_available_neighbour() {
    let mut sim = mesh((0..4).map(|i| store(i, [reading(i, "s", 5, 1.0)])).collect(), |a, b| 20 + 10 * (a + b) as u64);
    heard(&mut sim, &[1, 2, 3]);
    issue(&mut sim, &[node(0)], &mesh_collect()).unwrap();
    sim.run_until_quiescent(DRAIN).unwrap();
    let queries = sent(&sim, MessageKind::Query);
    let from_nodes: Vec<_> = queries.iter().filter(|(from, _, _)| *from != EndpointId::client()).collect();
    assert_eq!(from_nodes.len(), 3);
    assert!(from_nodes.iter().all(|(from, _, _)| *from == node(0)));
    // every forward leaves at the same instant
    assert_eq!(from_nodes.iter().map(|q| q.2).collect::<BTreeSet<_>>().len(), 1);
}

#[test]
fn transformers_scale_back_to_zero() {
    let data = three_disjoint();
    let mut sim = mesh(data.iter().enumerate().map(|(i, d)| store(i, d.clone())).collect(), |_, _| 60);
    heard(&mut sim, &[1, 2]);
    let req = mesh_collect().with_transformer(TransformerSpec::new(AGGREGATE_MEAN));
    issue(&mut sim, &[node(0)], &req).unwrap();
    sim.run_until_quiescent(DRAIN).unwrap();
    for i in 0..3 {
        let reg = sim.actor::<SyncMeshNode>(node(i)).unwrap().transformers();
        let stats = reg.stats(AGGREGATE_MEAN).unwrap();
        assert_eq!((stats.active, stats.invocations), (0, 1));
    }
}

#[test]
fn unknown_transformer_is_reported_in_the_response() {
    let mut sim = mesh(vec![store(0, []), store(1, [])], |_, _| 30);
    let req = mesh_collect().with_transformer(TransformerSpec::new("fft"));
    let out = issue(&mut sim, &[node(0)], &req).unwrap();
    match &out.response(node(0)).unwrap().payload {
        Payload::Error(e) => assert_eq!(e.code, "transformer_unknown"),
        other => panic!("unexpected {other:?}"),
    }
}

fn subscribed_pair() -> Simulation {
    let mut sim = mesh(vec![store(0, []), store(1, []), store(2, [])], |_, _| 30);
    sim.with_actor::<SyncMeshNode, _>(node(1), |n, ctx| n.subscribe_to(node(0), FieldSet::ALL, ctx));
    sim.run_until_quiescent(1000).unwrap();
    sim.take_ledger();
    sim
}

#[test]
fn one_subscriber_one_insert_one_notify() {
    let mut sim = subscribed_pair();
    assert_eq!(sim.actor::<SyncMeshNode>(node(0)).unwrap().subscriptions().len(), 1);
    let r = reading(0, "s", 42, 3.5);
    sim.with_actor::<SyncMeshNode, _>(node(0), |n, ctx| n.insert(r.clone(), ctx).unwrap());
    sim.run_until_quiescent(10_000).unwrap();
    let notes = sent(&sim, MessageKind::Notify);
    assert_eq!(notes.len(), 1);
    assert_eq!((notes[0].0, notes[0].1), (node(0), node(1)));
    let n1 = sim.actor::<SyncMeshNode>(node(1)).unwrap();
    assert_eq!(n1.notifications().len(), 1);
    assert_eq!(n1.store().iter().collect::<Vec<_>>(), vec![&r]);
}

#[test]
fn no_subscribers_no_notify() {
    let mut sim = mesh(vec![store(0, []), store(1, [])], |_, _| 30);
    sim.with_actor::<SyncMeshNode, _>(node(0), |n, ctx| n.insert(reading(0, "s", 1, 1.0), ctx).unwrap());
    sim.run_until_quiescent(10_000).unwrap();
    assert!(sim.captured().is_empty());
}

#[test]
fn notify_to_a_down_subscriber_is_lost() {
    let mut sim = subscribed_pair();
    sim.set_available(node(1), false).unwrap();
    sim.with_actor::<SyncMeshNode, _>(node(0), |n, ctx| n.insert(reading(0, "s", 1, 1.0), ctx).unwrap());
    sim.run_until_quiescent(10_000).unwrap();
    assert_eq!(sim.ledger().kind_total(MessageKind::Notify), sim.ledger().class_total(LinkClass::NodeNode));
    assert_eq!(sent(&sim, MessageKind::Notify).len(), 1);
    sim.set_available(node(1), true).unwrap();
    sim.run_until_quiescent(20_000).unwrap();
    let n1 = sim.actor::<SyncMeshNode>(node(1)).unwrap();
    assert!(n1.notifications().is_empty() && n1.store().is_empty());
}

#[test]
fn repeated_subscription_is_kept_once() {
    let mut sim = subscribed_pair();
    sim.with_actor::<SyncMeshNode, _>(node(1), |n, ctx| n.subscribe_to(node(0), FieldSet::ALL, ctx));
    sim.run_until_quiescent(10_000).unwrap();
    assert_eq!(sim.actor::<SyncMeshNode>(node(0)).unwrap().subscriptions().len(), 1);
}

#[test]
fn filtered_subscription_projects_the_notification() {
    let mut sim = mesh(vec![store(0, []), store(1, [])], |_, _| 30);
    let filter = FieldSet::of([Field::Temperature]);
    sim.with_actor::<SyncMeshNode, _>(node(1), |n, ctx| n.subscribe_to(node(0), filter, ctx));
    sim.run_until_quiescent(1000).unwrap();
    sim.with_actor::<SyncMeshNode, _>(node(0), |n, ctx| n.insert(reading(0, "s", 9, 7.25), ctx).unwrap());
    sim.run_until_quiescent(10_000).unwrap();
    let n1 = sim.actor::<SyncMeshNode>(node(1)).unwrap();
    let body: serde_json::Value = serde_json::from_slice(&n1.notifications()[0].body).unwrap();
    let keys: BTreeSet<&str> = body.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["node_id", "sensor_id", "timestamp", "temperature"]));
}
