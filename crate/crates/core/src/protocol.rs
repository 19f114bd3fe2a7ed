//! Body encodings for each message kind.

use alloc::vec::Vec;

use crate::model::{FieldSet, Payload, QueryRequest, QueryResponse, SensorReading};
use crate::wire::{compress, decode_json, Codec, Envelope, MessageKind, WireError};

pub fn encode_request(req: &QueryRequest) -> Vec<u8> {
    serde_json::to_vec(req).expect("request serialization is infallible")
}

pub fn decode_request(env: &Envelope) -> Result<QueryRequest, WireError> {
    decode_json(&env.decoded_body()?)
}

/// JSON of `resp` (readings projected onto `fields`) compressed with `codec`.
pub fn encode_response(resp: &QueryResponse, fields: FieldSet, codec: Codec) -> Vec<u8> {
    compress(codec, &resp.to_json(fields))
}

pub fn decode_response(env: &Envelope) -> Result<QueryResponse, WireError> {
    decode_json(&env.decoded_body()?)
}

/// Whether the envelope body holds raw readings (as opposed to queries,
/// summaries, control traffic or errors).
pub fn carries_readings(env: &Envelope) -> Result<bool, WireError> {
    Ok(match env.kind {
        MessageKind::Query | MessageKind::Subscribe | MessageKind::Heartbeat => false,
        MessageKind::Ingest | MessageKind::Gossip | MessageKind::GossipEcho => true,
        MessageKind::Response => matches!(decode_response(env)?.payload, Payload::Readings(_)),
        MessageKind::Notify => {
            let body = env.decoded_body()?;
            decode_json::<SensorReading>(&body).is_ok()
                || matches!(decode_json::<Payload>(&body), Ok(Payload::Readings(_)))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        FieldSet, Geo, NodeId, QueryRequest, RequestId, Scope, SensorId, Summary, TimeRange, Timestamp,
    };
    use crate::wire::EndpointId;
    use alloc::collections::BTreeSet;
    use alloc::vec;
    use bytes::Bytes;

    fn env(kind: MessageKind, codec: Codec, body: Vec<u8>) -> Envelope {
        Envelope {
            kind,
            codec,
            sender: EndpointId::node(1),
            receiver: EndpointId::node(0),
            request_id: RequestId(9),
            body: Bytes::from(body),
        }
    }

    fn reading() -> SensorReading {
        SensorReading {
            node_id: NodeId::new("node-1"),
            sensor_id: SensorId::new("s"),
            timestamp: Timestamp(3),
            geo: Some(Geo { lat: 1.0, lon: 2.0 }),
            p1: Some(1.0),
            p2: Some(2.0),
            temperature: Some(3.0),
            humidity: Some(4.0),
            pressure: None,
        }
    }

    fn response(payload: Payload) -> QueryResponse {
        QueryResponse {
            request_id: RequestId(9),
            payload,
            contributing_nodes: BTreeSet::from([NodeId::new("node-1")]),
            partial: false,
            codec: Codec::Gzip,
        }
    }

    #[test]
    fn request_round_trips() {
        let req = QueryRequest::collect(TimeRange::new(1, 5).unwrap(), Scope::Mesh, RequestId(9));
        let e = env(MessageKind::Query, Codec::None, encode_request(&req));
        assert_eq!(decode_request(&e).unwrap(), req);
        assert!(!carries_readings(&e).unwrap());
    }

    #[test]
    fn compressed_response_round_trips() {
        let resp = response(Payload::Readings(vec![reading()]));
        for codec in [Codec::None, Codec::Gzip, Codec::Fastlz] {
            let e = env(MessageKind::Response, codec, encode_response(&resp, FieldSet::ALL, codec));
            let back = decode_response(&e).unwrap();
            assert_eq!(back.payload, resp.payload);
            assert_eq!(back.contributing_nodes, resp.contributing_nodes);
        }
    }

    #[test]
    fn responses_are_classified_by_payload() {
        let readings = response(Payload::Readings(vec![reading()]));
        let summary = response(Payload::Summary(Summary::over(&[reading()], FieldSet::ALL)));
        let e = |r: &QueryResponse| {
            env(MessageKind::Response, Codec::Fastlz, encode_response(r, FieldSet::ALL, Codec::Fastlz))
        };
        assert!(carries_readings(&e(&readings)).unwrap());
        assert!(!carries_readings(&e(&summary)).unwrap());
    }

    #[test]
    fn notify_is_classified_by_body() {
        let raw = env(MessageKind::Notify, Codec::None, serde_json::to_vec(&reading()).unwrap());
        assert!(carries_readings(&raw).unwrap());
        let summary = Payload::Summary(Summary::over(&[reading()], FieldSet::ALL));
        let agg = env(MessageKind::Notify, Codec::None, summary.to_json(FieldSet::ALL));
        assert!(!carries_readings(&agg).unwrap());
    }

    #[test]
    fn undecodable_response_is_an_error() {
        let e = env(MessageKind::Response, Codec::Gzip, b"not gzip".to_vec());
        assert!(carries_readings(&e).is_err());
        assert!(!carries_readings(&env(MessageKind::Heartbeat, Codec::None, vec![])).unwrap());
        assert!(carries_readings(&env(MessageKind::Gossip, Codec::None, vec![])).unwrap());
    }
}
