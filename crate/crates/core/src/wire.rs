//! Message framing, payload encoding and compression codecs.
//!
//! Every message travels as an [`Envelope`]: a fixed 64-byte header followed
//! by the (possibly compressed) body.
//!
//! ```text
//! offset  size  field
//!      0     1  kind
//!      1     1  codec
//!      2     6  reserved (zero)
//!      8    16  sender id (UTF-8, zero padded)
//!     24    16  receiver id (UTF-8, zero padded)
//!     40    16  request id (u128, big-endian)
//!     56     8  body length (u64, big-endian)
//!     64     -  body
//! ```

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::model::{FieldSet, ProjectedSet, RequestId, SensorReading};

pub const HEADER_LEN: usize = 64;

/// DEFLATE level used for GZIP bodies.
pub const GZIP_LEVEL: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    None,
    Gzip,
    Fastlz,
}

impl Codec {
    pub const fn to_byte(self) -> u8 {
        match self {
            Codec::None => 0,
            Codec::Gzip => 1,
            Codec::Fastlz => 2,
        }
    }

    pub const fn from_byte(b: u8) -> Option<Codec> {
        match b {
            0 => Some(Codec::None),
            1 => Some(Codec::Gzip),
            2 => Some(Codec::Fastlz),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("corrupt {codec:?} stream: {reason}")]
    Corrupt { codec: Codec, reason: String },
    #[error("malformed envelope: {0}")]
    Frame(&'static str),
    #[error("undecodable body: {0}")]
    Decode(String),
    #[error("id `{0}` longer than 16 bytes")]
    IdTooLong(String),
}

fn corrupt(codec: Codec, reason: impl Into<String>) -> WireError {
    WireError::Corrupt { codec, reason: reason.into() }
}

pub fn compress(codec: Codec, data: &[u8]) -> Vec<u8> {
    match codec {
        Codec::None => data.to_vec(),
        Codec::Gzip => gzip::compress(data),
        Codec::Fastlz => lz4_flex::block::compress_prepend_size(data),
    }
}

pub fn decompress(codec: Codec, data: &[u8]) -> Result<Vec<u8>, WireError> {
    match codec {
        Codec::None => Ok(data.to_vec()),
        Codec::Gzip => gzip::decompress(data),
        Codec::Fastlz => {
            lz4_flex::block::decompress_size_prepended(data).map_err(|e| corrupt(Codec::Fastlz, alloc::format!("{e}")))
        }
    }
}

/// Single-member gzip (RFC 1952) around a raw DEFLATE stream.
mod gzip {
    use super::*;
    use miniz_oxide::deflate::compress_to_vec;
    use miniz_oxide::inflate::decompress_to_vec;

    const MAGIC: [u8; 2] = [0x1f, 0x8b];
    const CM_DEFLATE: u8 = 8;
    const FHCRC: u8 = 0x02;
    const FEXTRA: u8 = 0x04;
    const FNAME: u8 = 0x08;
    const FCOMMENT: u8 = 0x10;

    pub fn compress(data: &[u8]) -> Vec<u8> {
        let deflated = compress_to_vec(data, GZIP_LEVEL);
        let mut out = Vec::with_capacity(deflated.len() + 18);
        // mtime 0, xfl 0, os 255 (unknown): output depends on input bytes only
        out.extend_from_slice(&[MAGIC[0], MAGIC[1], CM_DEFLATE, 0, 0, 0, 0, 0, 0, 0xff]);
        out.extend_from_slice(&deflated);
        out.extend_from_slice(&crc32fast::hash(data).to_le_bytes());
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out
    }

    pub fn decompress(data: &[u8]) -> Result<Vec<u8>, WireError> {
        let err = |r: &str| corrupt(Codec::Gzip, r);
        if data.len() < 18 || data[..2] != MAGIC {
            return Err(err("missing gzip header"));
        }
        if data[2] != CM_DEFLATE {
            return Err(err("unsupported compression method"));
        }
        let flags = data[3];
        let trailer = data.len() - 8;
        let mut pos = 10;
        if flags & FEXTRA != 0 {
            let xlen = u16::from_le_bytes([data[pos], data[pos + 1]]) as usize;
            pos += 2 + xlen;
        }
        for flag in [FNAME, FCOMMENT] {
            if flags & flag != 0 {
                let nul = data
                    .get(pos..trailer)
                    .and_then(|s| s.iter().position(|b| *b == 0))
                    .ok_or_else(|| err("unterminated header string"))?;
                pos += nul + 1;
            }
        }
        if flags & FHCRC != 0 {
            pos += 2;
        }
        if pos > trailer {
            return Err(err("truncated header"));
        }
        let out = decompress_to_vec(&data[pos..trailer])
            .map_err(|e| corrupt(Codec::Gzip, alloc::format!("{:?}", e.status)))?;
        let crc = u32::from_le_bytes(data[trailer..trailer + 4].try_into().unwrap());
        let isize = u32::from_le_bytes(data[trailer + 4..].try_into().unwrap());
        if crc != crc32fast::hash(&out) {
            return Err(err("crc mismatch"));
        }
        if isize != out.len() as u32 {
            return Err(err("length mismatch"));
        }
        Ok(out)
    }
}

/// Canonical JSON array of readings, emitting only projected fields.
pub fn encode_readings(readings: &[SensorReading], projection: FieldSet) -> Vec<u8> {
    serde_json::to_vec(&ProjectedSet { readings, fields: projection }).expect("reading serialization is infallible")
}

pub fn decode_readings(bytes: &[u8]) -> Result<Vec<SensorReading>, WireError> {
    decode_json(bytes)
}

pub fn decode_json<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, WireError> {
    serde_json::from_slice(bytes).map_err(|e| WireError::Decode(alloc::format!("{e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Query,
    Response,
    Ingest,
    Gossip,
    GossipEcho,
    Subscribe,
    Notify,
    Heartbeat,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::Query,
        MessageKind::Response,
        MessageKind::Ingest,
        MessageKind::Gossip,
        MessageKind::GossipEcho,
        MessageKind::Subscribe,
        MessageKind::Notify,
        MessageKind::Heartbeat,
    ];

    pub const fn to_byte(self) -> u8 {
        match self {
            MessageKind::Query => 1,
            MessageKind::Response => 2,
            MessageKind::Ingest => 3,
            MessageKind::Gossip => 4,
            MessageKind::GossipEcho => 5,
            MessageKind::Subscribe => 6,
            MessageKind::Notify => 7,
            MessageKind::Heartbeat => 8,
        }
    }

    pub fn from_byte(b: u8) -> Option<MessageKind> {
        MessageKind::ALL.into_iter().find(|k| k.to_byte() == b)
    }

    pub const fn name(self) -> &'static str {
        match self {
            MessageKind::Query => "query",
            MessageKind::Response => "response",
            MessageKind::Ingest => "ingest",
            MessageKind::Gossip => "gossip",
            MessageKind::GossipEcho => "gossip_echo",
            MessageKind::Subscribe => "subscribe",
            MessageKind::Notify => "notify",
            MessageKind::Heartbeat => "heartbeat",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Endpoint identifier as carried in the envelope header: up to 16 bytes of
/// UTF-8, zero padded.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EndpointId([u8; 16]);

impl EndpointId {
    pub fn new(id: &str) -> Result<Self, WireError> {
        let bytes = id.as_bytes();
        if bytes.len() > 16 || bytes.contains(&0) {
            return Err(WireError::IdTooLong(id.into()));
        }
        let mut raw = [0u8; 16];
        raw[..bytes.len()].copy_from_slice(bytes);
        Ok(EndpointId(raw))
    }

    /// Id of the `index`-th node endpoint: `node-<index>`.
    pub fn node(index: usize) -> Self {
        Self::new(&alloc::format!("node-{index}")).expect("node ids fit in 16 bytes")
    }

    pub fn client() -> Self {
        Self::new("client").unwrap()
    }

    pub fn server() -> Self {
        Self::new("server").unwrap()
    }

    pub const fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn from_raw(raw: [u8; 16]) -> Result<Self, WireError> {
        let len = raw.iter().position(|b| *b == 0).unwrap_or(16);
        if raw[len..].iter().any(|b| *b != 0) || core::str::from_utf8(&raw[..len]).is_err() {
            return Err(WireError::Frame("endpoint id is not zero-padded UTF-8"));
        }
        Ok(EndpointId(raw))
    }

    pub fn as_str(&self) -> &str {
        let len = self.0.iter().position(|b| *b == 0).unwrap_or(16);
        core::str::from_utf8(&self.0[..len]).expect("validated on construction")
    }
}

impl fmt::Debug for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EndpointId({:?})", self.as_str())
    }
}

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: MessageKind,
    pub codec: Codec,
    pub sender: EndpointId,
    pub receiver: EndpointId,
    pub request_id: RequestId,
    pub body: Bytes,
}

impl Envelope {
    /// Header plus body length; the unit of all traffic accounting.
    pub fn wire_size(&self) -> u64 {
        (HEADER_LEN + self.body.len()) as u64
    }

    pub fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0] = self.kind.to_byte();
        h[1] = self.codec.to_byte();
        h[8..24].copy_from_slice(self.sender.as_bytes());
        h[24..40].copy_from_slice(self.receiver.as_bytes());
        h[40..56].copy_from_slice(&self.request_id.0.to_be_bytes());
        h[56..64].copy_from_slice(&(self.body.len() as u64).to_be_bytes());
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Envelope, WireError> {
        if data.len() < HEADER_LEN {
            return Err(WireError::Frame("shorter than header"));
        }
        let kind = MessageKind::from_byte(data[0]).ok_or(WireError::Frame("unknown kind"))?;
        let codec = Codec::from_byte(data[1]).ok_or(WireError::Frame("unknown codec"))?;
        if data[2..8].iter().any(|b| *b != 0) {
            return Err(WireError::Frame("reserved bytes set"));
        }
        let sender = EndpointId::from_raw(data[8..24].try_into().unwrap())?;
        let receiver = EndpointId::from_raw(data[24..40].try_into().unwrap())?;
        let request_id = RequestId(u128::from_be_bytes(data[40..56].try_into().unwrap()));
        let len = u64::from_be_bytes(data[56..64].try_into().unwrap());
        if len != (data.len() - HEADER_LEN) as u64 {
            return Err(WireError::Frame("body length mismatch"));
        }
        Ok(Envelope { kind, codec, sender, receiver, request_id, body: Bytes::copy_from_slice(&data[HEADER_LEN..]) })
    }

    /// Body with the header codec undone.
    pub fn decoded_body(&self) -> Result<Vec<u8>, WireError> {
        decompress(self.codec, &self.body)
    }
}
