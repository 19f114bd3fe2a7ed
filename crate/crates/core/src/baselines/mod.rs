//! Comparison systems built on the same store, wire and network substrate:
//! a central database, a sharded database behind a router, and fully
//! replicated peers.

pub mod central;
pub mod p2p;
pub mod sharded;

pub use central::{central_ingest, CentralServer};
pub use p2p::{p2p_client_collect, p2p_sync, Replica, Version};
pub use sharded::{Shard, ShardRouter};

use alloc::vec::Vec;

use bytes::Bytes;

use crate::model::{FieldSet, SensorReading};
use crate::wire::{compress, encode_readings, Codec};

/// Readings per INGEST or GOSSIP envelope.
pub const BATCH_SIZE: usize = 500;

/// Bodies for `readings` in batches of [`BATCH_SIZE`], encoded then
/// compressed with `codec`.
pub fn batch_bodies(readings: &[SensorReading], codec: Codec) -> Vec<Bytes> {
    readings
        .chunks(BATCH_SIZE)
        .map(|chunk| Bytes::from(compress(codec, &encode_readings(chunk, FieldSet::ALL))))
        .collect()
}
