//! Per-node reading storage with range queries, aggregation and a change
//! stream.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Bound;

use crate::model::{
    FieldSet, NodeId, ReadingKey, SensorId, SensorReading, Summary, TimeRange, Timestamp, ValidationError,
};

/// Emitted once per accepted insert. `seq` starts at 1 and has no gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeEvent {
    pub seq: u64,
    pub reading: SensorReading,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InsertOutcome {
    Inserted(ChangeEvent),
    /// The (node_id, sensor_id, timestamp) key was already present.
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ListenerHandle(u64);

type Listener = Box<dyn FnMut(&ChangeEvent)>;

/// Time-ordered reading storage owned by one node.
pub struct LocalStore {
    node_id: NodeId,
    readings: BTreeMap<ReadingKey, SensorReading>,
    seq: u64,
    listeners: Vec<(ListenerHandle, Listener)>,
    next_listener: u64,
}

impl fmt::Debug for LocalStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalStore")
            .field("node_id", &self.node_id)
            .field("len", &self.readings.len())
            .field("seq", &self.seq)
            .field("listeners", &self.listeners.len())
            .finish()
    }
}

impl LocalStore {
    pub fn new(node_id: NodeId) -> Self {
        LocalStore { node_id, readings: BTreeMap::new(), seq: 0, listeners: Vec::new(), next_listener: 0 }
    }

    /// Store pre-filled with `readings`; invalid readings are rejected.
    pub fn with_readings(
        node_id: NodeId,
        readings: impl IntoIterator<Item = SensorReading>,
    ) -> Result<Self, ValidationError> {
        let mut store = LocalStore::new(node_id);
        for r in readings {
            store.insert(r)?;
        }
        Ok(store)
    }

    /// Copy of the stored data and sequence counter, without listeners.
    pub fn fork(&self) -> LocalStore {
        LocalStore {
            node_id: self.node_id.clone(),
            readings: self.readings.clone(),
            seq: self.seq,
            listeners: Vec::new(),
            next_listener: 0,
        }
    }

    pub fn node_id(&self) -> &NodeId {
        &self.node_id
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    /// Sequence number of the last emitted change event.
    pub fn last_seq(&self) -> u64 {
        self.seq
    }

    /// Readings in canonical (timestamp, sensor_id, node_id) order.
    pub fn iter(&self) -> impl Iterator<Item = &SensorReading> {
        self.readings.values()
    }

    pub fn get(&self, key: &ReadingKey) -> Option<&SensorReading> {
        self.readings.get(key)
    }

    pub fn first_timestamp(&self) -> Option<Timestamp> {
        self.readings.keys().next().map(|k| k.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<Timestamp> {
        self.readings.keys().next_back().map(|k| k.timestamp)
    }

    pub fn insert(&mut self, reading: SensorReading) -> Result<InsertOutcome, ValidationError> {
        reading.validate()?;
        let key = reading.key();
        if self.readings.contains_key(&key) {
            return Ok(InsertOutcome::Duplicate);
        }
        self.readings.insert(key, reading.clone());
        self.seq += 1;
        let event = ChangeEvent { seq: self.seq, reading };
        for (_, listener) in &mut self.listeners {
            listener(&event);
        }
        Ok(InsertOutcome::Inserted(event))
    }

    /// Inserts or overwrites the reading under its key, returning the previous
    /// value. Overwrites count as changes.
    pub fn replace(&mut self, reading: SensorReading) -> Result<Option<SensorReading>, ValidationError> {
        reading.validate()?;
        self.seq += 1;
        if self.listeners.is_empty() {
            return Ok(self.readings.insert(reading.key(), reading));
        }
        let old = self.readings.insert(reading.key(), reading.clone());
        let event = ChangeEvent { seq: self.seq, reading };
        for (_, listener) in &mut self.listeners {
            listener(&event);
        }
        Ok(old)
    }

    fn in_range(&self, range: TimeRange) -> impl Iterator<Item = &SensorReading> {
        // (timestamp, "", "") sorts before every key with that timestamp
        let lower =
            |ts: Timestamp| ReadingKey { timestamp: ts, sensor_id: SensorId::new(""), node_id: NodeId::new("") };
        let valid = range.start < range.end;
        let (lo, hi) = if valid {
            (Bound::Included(lower(range.start)), Bound::Excluded(lower(range.end)))
        } else {
            (Bound::Unbounded, Bound::Excluded(lower(Timestamp(0))))
        };
        self.readings.range((lo, hi)).map(|(_, r)| r)
    }

    /// Readings with timestamp in `[start, end)`, ordered, projected.
    pub fn query(&self, range: TimeRange, projection: FieldSet) -> Vec<SensorReading> {
        if projection.is_empty() {
            self.in_range(range).cloned().collect()
        } else {
            self.in_range(range).map(|r| r.project(projection)).collect()
        }
    }

    /// Summary over the numeric members of `fields` for readings in range.
    pub fn aggregate(&self, range: TimeRange, fields: FieldSet) -> Summary {
        Summary::over(self.in_range(range), fields)
    }

    /// `callback` sees every later insert exactly once, in seq order. Earlier
    /// events are not replayed.
    pub fn register_listener(&mut self, callback: impl FnMut(&ChangeEvent) + 'static) -> ListenerHandle {
        let handle = ListenerHandle(self.next_listener);
        self.next_listener += 1;
        self.listeners.push((handle, Box::new(callback)));
        handle
    }

    pub fn unregister_listener(&mut self, handle: ListenerHandle) -> bool {
        let before = self.listeners.len();
        self.listeners.retain(|(h, _)| *h != handle);
        self.listeners.len() != before
    }
}
