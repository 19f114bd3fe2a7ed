//! Domain types shared by every component.
//!
//! Readings, time ranges, the unified query request/response schema and the
//! per-field summary used by aggregation. All types have a canonical JSON
//! encoding (lowercase snake_case keys, fields in declaration order) which is
//! what travels on the wire before compression.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::wire::Codec;

/// Virtual or wall-clock time in milliseconds.
pub type Millis = u64;

/// Milliseconds in one day.
pub const DAY_MS: Millis = 86_400_000;

/// UTC milliseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const fn millis(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! shared_str_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(id: impl AsRef<str>) -> Self {
                Self(Arc::from(id.as_ref()))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({:?})", stringify!($name), &*self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self::new(s)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = <alloc::borrow::Cow<'de, str>>::deserialize(d)?;
                Ok(Self::new(&*s))
            }
        }
    };
}

shared_str_id!(
    /// Identifier of the node a reading was produced on.
    NodeId
);
shared_str_id!(
    /// Identifier of a physical sensor.
    SensorId
);

/// Geographic position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geo {
    pub lat: f64,
    pub lon: f64,
}

/// Field names of [`SensorReading`], in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    NodeId,
    SensorId,
    Timestamp,
    Geo,
    P1,
    P2,
    Temperature,
    Humidity,
    Pressure,
}

impl Field {
    pub const ALL: [Field; 9] = [
        Field::NodeId,
        Field::SensorId,
        Field::Timestamp,
        Field::Geo,
        Field::P1,
        Field::P2,
        Field::Temperature,
        Field::Humidity,
        Field::Pressure,
    ];

    /// Fields that can be aggregated.
    pub const NUMERIC: [Field; 5] = [Field::P1, Field::P2, Field::Temperature, Field::Humidity, Field::Pressure];

    pub const fn name(self) -> &'static str {
        match self {
            Field::NodeId => "node_id",
            Field::SensorId => "sensor_id",
            Field::Timestamp => "timestamp",
            Field::Geo => "geo",
            Field::P1 => "p1",
            Field::P2 => "p2",
            Field::Temperature => "temperature",
            Field::Humidity => "humidity",
            Field::Pressure => "pressure",
        }
    }

    pub fn from_name(name: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.name() == name)
    }

    pub const fn is_numeric(self) -> bool {
        matches!(self, Field::P1 | Field::P2 | Field::Temperature | Field::Humidity | Field::Pressure)
    }

    /// Identity fields are emitted regardless of projection.
    pub const fn is_identity(self) -> bool {
        matches!(self, Field::NodeId | Field::SensorId | Field::Timestamp)
    }

    const fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Field {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Field {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(d)?;
        Field::from_name(&s).ok_or_else(|| de::Error::custom(alloc::format!("unknown field `{s}`")))
    }
}

/// A set of fields. The empty set is a projection onto every field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FieldSet(u16);

impl FieldSet {
    /// The empty projection, meaning "all fields".
    pub const ALL: FieldSet = FieldSet(0);

    pub fn of(fields: impl IntoIterator<Item = Field>) -> Self {
        fields.into_iter().fold(FieldSet(0), |s, f| s.with(f))
    }

    pub const fn with(self, f: Field) -> Self {
        FieldSet(self.0 | f.bit())
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub const fn contains(self, f: Field) -> bool {
        self.0 & f.bit() != 0
    }

    /// Whether a reading projected onto this set keeps `f`.
    pub const fn projects(self, f: Field) -> bool {
        self.is_empty() || f.is_identity() || self.contains(f)
    }

    pub fn iter(self) -> impl Iterator<Item = Field> {
        Field::ALL.into_iter().filter(move |f| self.contains(*f))
    }

    /// Numeric fields selected by this projection (all of them when empty).
    pub fn numeric(self) -> impl Iterator<Item = Field> {
        Field::NUMERIC.into_iter().filter(move |f| self.projects(*f))
    }

    pub fn names(self) -> BTreeSet<String> {
        self.iter().map(|f| f.name().to_string()).collect()
    }
}

impl Serialize for FieldSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for FieldSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(FieldSet::of(Vec::<Field>::deserialize(d)?))
    }
}

/// One timestamped multi-field measurement from one sensor on one node.
///
/// Measurement fields are `None` when projected away or absent at the source.
/// A reading accepted by a store carries everything except possibly `pressure`
/// (see [`SensorReading::validate`]).
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SensorReading {
    pub node_id: NodeId,
    pub sensor_id: SensorId,
    pub timestamp: Timestamp,
    #[serde(default)]
    pub geo: Option<Geo>,
    #[serde(default)]
    pub p1: Option<f64>,
    #[serde(default)]
    pub p2: Option<f64>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub humidity: Option<f64>,
    #[serde(default)]
    pub pressure: Option<f64>,
}

/// Uniqueness and ordering key of a reading: (timestamp, sensor_id, node_id).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReadingKey {
    pub timestamp: Timestamp,
    pub sensor_id: SensorId,
    pub node_id: NodeId,
}

impl SensorReading {
    pub fn key(&self) -> ReadingKey {
        ReadingKey { timestamp: self.timestamp, sensor_id: self.sensor_id.clone(), node_id: self.node_id.clone() }
    }

    pub fn numeric(&self, field: Field) -> Option<f64> {
        match field {
            Field::P1 => self.p1,
            Field::P2 => self.p2,
            Field::Temperature => self.temperature,
            Field::Humidity => self.humidity,
            Field::Pressure => self.pressure,
            _ => None,
        }
    }

    /// Copy with every field outside `fields` cleared.
    pub fn project(&self, fields: FieldSet) -> SensorReading {
        let keep = |f: Field, v: Option<f64>| if fields.projects(f) { v } else { None };
        SensorReading {
            node_id: self.node_id.clone(),
            sensor_id: self.sensor_id.clone(),
            timestamp: self.timestamp,
            geo: if fields.projects(Field::Geo) { self.geo } else { None },
            p1: keep(Field::P1, self.p1),
            p2: keep(Field::P2, self.p2),
            temperature: keep(Field::Temperature, self.temperature),
            humidity: keep(Field::Humidity, self.humidity),
            pressure: keep(Field::Pressure, self.pressure),
        }
    }

    /// Checks the invariants a stored reading must satisfy.
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.timestamp.0 == 0 {
            return Err(ValidationError::new("timestamp", "must be > 0"));
        }
        let geo = self.geo.ok_or_else(|| ValidationError::new("geo", "missing"))?;
        if !(-90.0..=90.0).contains(&geo.lat) || !(-180.0..=180.0).contains(&geo.lon) {
            return Err(ValidationError::new("geo", "coordinates out of range"));
        }
        for field in [Field::P1, Field::P2] {
            match self.numeric(field) {
                None => return Err(ValidationError::new(field.name(), "missing")),
                Some(v) if !(v >= 0.0 && v.is_finite()) => {
                    return Err(ValidationError::new(field.name(), "must be finite and >= 0"))
                }
                _ => {}
            }
        }
        match self.temperature {
            None => return Err(ValidationError::new("temperature", "missing")),
            Some(v) if !v.is_finite() => return Err(ValidationError::new("temperature", "must be finite")),
            _ => {}
        }
        match self.humidity {
            None => return Err(ValidationError::new("humidity", "missing")),
            Some(v) if !(0.0..=100.0).contains(&v) => {
                return Err(ValidationError::new("humidity", "must be within [0, 100]"))
            }
            _ => {}
        }
        if let Some(p) = self.pressure {
            if !p.is_finite() || p < 0.0 {
                return Err(ValidationError::new("pressure", "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Total order: canonical key first, then field values (IEEE total order).
    /// Order of the readings' keys, without building them.
    pub fn key_cmp(&self, other: &Self) -> Ordering {
        self.timestamp
            .cmp(&other.timestamp)
            .then_with(|| self.sensor_id.cmp(&other.sensor_id))
            .then_with(|| self.node_id.cmp(&other.node_id))
    }

    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        fn opt(a: Option<f64>, b: Option<f64>) -> Ordering {
            match (a, b) {
                (None, None) => Ordering::Equal,
                (None, Some(_)) => Ordering::Less,
                (Some(_), None) => Ordering::Greater,
                (Some(x), Some(y)) => x.total_cmp(&y),
            }
        }
        self.key_cmp(other)
            .then_with(|| opt(self.geo.map(|g| g.lat), other.geo.map(|g| g.lat)))
            .then_with(|| opt(self.geo.map(|g| g.lon), other.geo.map(|g| g.lon)))
            .then_with(|| opt(self.p1, other.p1))
            .then_with(|| opt(self.p2, other.p2))
            .then_with(|| opt(self.temperature, other.temperature))
            .then_with(|| opt(self.humidity, other.humidity))
            .then_with(|| opt(self.pressure, other.pressure))
    }

    /// Serializable view emitting only the projected fields.
    pub fn projected(&self, fields: FieldSet) -> Projected<'_> {
        Projected { reading: self, fields }
    }
}

impl Serialize for SensorReading {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.projected(FieldSet::ALL).serialize(s)
    }
}

/// A reading serialized under a projection. Identity keys are always present;
/// projected-away fields are omitted, absent projected fields are `null`.
#[derive(Clone, Copy)]
pub struct Projected<'a> {
    reading: &'a SensorReading,
    fields: FieldSet,
}

impl Serialize for Projected<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = self.reading;
        let mut map = s.serialize_map(None)?;
        map.serialize_entry("node_id", &r.node_id)?;
        map.serialize_entry("sensor_id", &r.sensor_id)?;
        map.serialize_entry("timestamp", &r.timestamp)?;
        if self.fields.projects(Field::Geo) {
            map.serialize_entry("geo", &r.geo)?;
        }
        for field in Field::NUMERIC {
            if self.fields.projects(field) {
                map.serialize_entry(field.name(), &r.numeric(field))?;
            }
        }
        map.end()
    }
}

/// Serializable view of a reading slice under a projection.
#[derive(Clone, Copy)]
pub struct ProjectedSet<'a> {
    pub readings: &'a [SensorReading],
    pub fields: FieldSet,
}

impl Serialize for ProjectedSet<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.readings.iter().map(|r| r.projected(self.fields)))
    }
}

/// Sorts readings into canonical order and drops exact-key duplicates.
pub fn canonicalize(readings: &mut Vec<SensorReading>) {
    readings.sort_unstable_by(|a, b| a.canonical_cmp(b));
    readings.dedup_by(|b, a| a.timestamp == b.timestamp && a.sensor_id == b.sensor_id && a.node_id == b.node_id);
}

/// Union of lists that are each in canonical order, itself in canonical
/// order with one reading per key (the same one [`canonicalize`] keeps).
/// Falls back to a full sort when an input is out of order.
pub fn merge_canonical(parts: Vec<Vec<SensorReading>>) -> Vec<SensorReading> {
    let sorted = parts.iter().all(|p| p.windows(2).all(|w| w[0].key_cmp(&w[1]) == Ordering::Less));
    if !sorted {
        let mut all: Vec<SensorReading> = parts.into_iter().flatten().collect();
        canonicalize(&mut all);
        return all;
    }
    parts.into_iter().fold(Vec::new(), |acc, part| {
        if acc.is_empty() {
            return part;
        }
        let mut out = Vec::with_capacity(acc.len().max(part.len()));
        let (mut a, mut b) = (acc.into_iter().peekable(), part.into_iter().peekable());
        loop {
            let next = match (a.peek(), b.peek()) {
                (Some(x), Some(y)) => match x.key_cmp(y) {
                    Ordering::Less => a.next(),
                    Ordering::Greater => b.next(),
                    Ordering::Equal => {
                        let (x, y) = (a.next().unwrap(), b.next().unwrap());
                        Some(if y.canonical_cmp(&x) == Ordering::Less { y } else { x })
                    }
                },
                (Some(_), None) => a.next(),
                (None, Some(_)) => b.next(),
                (None, None) => break,
            };
            out.extend(next);
        }
        out
    })
}

/// Half-open interval `[start, end)` of UTC milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeRange {
    pub fn new(start: u64, end: u64) -> Result<Self, ValidationError> {
        let r = TimeRange { start: Timestamp(start), end: Timestamp(end) };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.start < self.end {
            Ok(())
        } else {
            Err(ValidationError::new("range", "start must be < end"))
        }
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        self.start <= ts && ts < self.end
    }

    /// Trailing window of `days` ending just after `last`.
    pub fn trailing_days(last: Timestamp, days: u64) -> Self {
        let end = last.0 + 1;
        TimeRange { start: Timestamp(end.saturating_sub(days * DAY_MS).max(1)), end: Timestamp(end) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl TransformerSpec {
    pub fn new(name: impl Into<String>) -> Self {
        TransformerSpec { name: name.into(), params: BTreeMap::new() }
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Local,
    Mesh,
}

/// 128-bit request identifier; encoded as 32 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RequestId(pub u128);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl Serialize for RequestId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RequestId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(d)?;
        if s.len() != 32 {
            return Err(de::Error::custom("request_id must be 32 hex digits"));
        }
        u128::from_str_radix(&s, 16).map(RequestId).map_err(|_| de::Error::custom("request_id must be 32 hex digits"))
    }
}

/// The unified request schema accepted by every coordinator, server and peer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub range: TimeRange,
    /// Field names to keep; empty keeps every field.
    #[serde(default)]
    pub projection: BTreeSet<String>,
    #[serde(default)]
    pub transformer: Option<TransformerSpec>,
    pub scope: Scope,
    pub request_id: RequestId,
}

impl QueryRequest {
    pub fn collect(range: TimeRange, scope: Scope, request_id: RequestId) -> Self {
        QueryRequest { range, projection: BTreeSet::new(), transformer: None, scope, request_id }
    }

    pub fn with_projection(mut self, fields: FieldSet) -> Self {
        self.projection = fields.names();
        self
    }

    pub fn with_transformer(mut self, spec: TransformerSpec) -> Self {
        self.transformer = Some(spec);
        self
    }

    /// Projection as a field set; fails on unknown names.
    pub fn fields(&self) -> Result<FieldSet, ValidationError> {
        self.projection.iter().try_fold(FieldSet::ALL, |set, name| {
            Field::from_name(name)
                .map(|f| set.with(f))
                .ok_or_else(|| ValidationError::new("projection", alloc::format!("unknown field `{name}`")))
        })
    }
}

/// Checks every [`QueryRequest`] invariant; the error names the first violated field.
pub fn validate_request(req: &QueryRequest) -> Result<(), ValidationError> {
    req.range.validate()?;
    req.fields()?;
    if let Some(t) = &req.transformer {
        if t.name.is_empty() {
            return Err(ValidationError::new("transformer", "name must not be empty"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid {field}: {reason}")]
pub struct ValidationError {
    pub field: &'static str,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        ValidationError { field, reason: reason.into() }
    }
}

/// Running aggregate for one numeric field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSummary {
    pub count: u64,
    pub sum: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for FieldSummary {
    fn default() -> Self {
        FieldSummary { count: 0, sum: 0.0, min: f64::INFINITY, max: f64::NEG_INFINITY }
    }
}

impl FieldSummary {
    pub fn observe(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    /// Exact merge of two partial aggregates; never averages means.
    pub fn merge(&mut self, other: &FieldSummary) {
        self.count += other.count;
        self.sum += other.sum;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

impl Serialize for FieldSummary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(None)?;
        map.serialize_entry("count", &self.count)?;
        if self.count > 0 {
            map.serialize_entry("sum", &self.sum)?;
            map.serialize_entry("min", &self.min)?;
            map.serialize_entry("max", &self.max)?;
            map.serialize_entry("mean", &(self.sum / self.count as f64))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for FieldSummary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            count: u64,
            sum: Option<f64>,
            min: Option<f64>,
            max: Option<f64>,
            #[allow(dead_code)]
            mean: Option<f64>,
        }
        let raw = Raw::deserialize(d)?;
        if raw.count == 0 {
            return Ok(FieldSummary::default());
        }
        match (raw.sum, raw.min, raw.max) {
            (Some(sum), Some(min), Some(max)) => Ok(FieldSummary { count: raw.count, sum, min, max }),
            _ => Err(de::Error::custom("non-empty summary needs sum, min and max")),
        }
    }
}

/// Per-field aggregate record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub fields: BTreeMap<Field, FieldSummary>,
}

impl Summary {
    /// Summary of `fields` (numeric members only; empty means all numeric).
    /// Null values do not count.
    pub fn over<'a>(readings: impl IntoIterator<Item = &'a SensorReading>, fields: FieldSet) -> Self {
        let selected: Vec<Field> = fields.numeric().collect();
        let mut acc: Vec<FieldSummary> = alloc::vec![FieldSummary::default(); selected.len()];
        for r in readings {
            for (slot, f) in acc.iter_mut().zip(&selected) {
                if let Some(v) = r.numeric(*f) {
                    slot.observe(v);
                }
            }
        }
        Summary { fields: selected.into_iter().zip(acc).collect() }
    }

    pub fn merge(&mut self, other: &Summary) {
        for (field, s) in &other.fields {
            self.fields.entry(*field).or_default().merge(s);
        }
    }

    pub fn get(&self, field: Field) -> Option<&FieldSummary> {
        self.fields.get(&field)
    }
}

impl Serialize for Summary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(self.fields.iter())
    }
}

impl<'de> Deserialize<'de> for Summary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Summary;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of field summaries")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> Result<Summary, A::Error> {
                let mut fields = BTreeMap::new();
                while let Some((k, v)) = m.next_entry::<Field, FieldSummary>()? {
                    if !k.is_numeric() {
                        return Err(de::Error::custom("summary over a non-numeric field"));
                    }
                    fields.insert(k, v);
                }
                Ok(Summary { fields })
            }
        }
        d.deserialize_map(V)
    }
}

/// Error reported in place of a result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// Response payload: raw readings, an aggregate, or a failure report.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Readings(Vec<SensorReading>),
    Summary(Summary),
    Error(ErrorBody),
}

impl Payload {
    pub fn readings(&self) -> Option<&[SensorReading]> {
        match self {
            Payload::Readings(r) => Some(r),
            _ => None,
        }
    }

    pub fn summary(&self) -> Option<&Summary> {
        match self {
            Payload::Summary(s) => Some(s),
            _ => None,
        }
    }

    /// Serializable view applying `fields` to reading payloads.
    pub fn projected(&self, fields: FieldSet) -> ProjectedPayload<'_> {
        ProjectedPayload { payload: self, fields }
    }

    /// Canonical JSON of the payload under `fields`.
    pub fn to_json(&self, fields: FieldSet) -> Vec<u8> {
        serde_json::to_vec(&self.projected(fields)).expect("payload serialization is infallible")
    }

    /// Content digest of the canonical JSON encoding.
    pub fn digest(&self, fields: FieldSet) -> String {
        content_digest(&self.to_json(fields))
    }
}

impl Serialize for Payload {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.projected(FieldSet::ALL).serialize(s)
    }
}

#[derive(Clone, Copy)]
pub struct ProjectedPayload<'a> {
    payload: &'a Payload,
    fields: FieldSet,
}

impl Serialize for ProjectedPayload<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(1))?;
        match self.payload {
            Payload::Readings(r) => {
                map.serialize_entry("readings", &ProjectedSet { readings: r, fields: self.fields })?
            }
            Payload::Summary(sum) => map.serialize_entry("summary", sum)?,
            Payload::Error(e) => map.serialize_entry("error", e)?,
        }
        map.end()
    }
}

/// Merged, possibly partial, reply to a [`QueryRequest`].
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct QueryResponse {
    pub request_id: RequestId,
    pub payload: Payload,
    pub contributing_nodes: BTreeSet<NodeId>,
    pub partial: bool,
    pub codec: Codec,
}

impl QueryResponse {
    /// Canonical JSON with reading payloads projected onto `fields`.
    pub fn to_json(&self, fields: FieldSet) -> Vec<u8> {
        #[derive(Serialize)]
        struct Out<'a> {
            request_id: RequestId,
            payload: ProjectedPayload<'a>,
            contributing_nodes: &'a BTreeSet<NodeId>,
            partial: bool,
            codec: Codec,
        }
        serde_json::to_vec(&Out {
            request_id: self.request_id,
            payload: self.payload.projected(fields),
            contributing_nodes: &self.contributing_nodes,
            partial: self.partial,
            codec: self.codec,
        })
        .expect("response serialization is infallible")
    }
}

impl Serialize for QueryResponse {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(5))?;
        map.serialize_entry("request_id", &self.request_id)?;
        map.serialize_entry("payload", &self.payload)?;
        map.serialize_entry("contributing_nodes", &self.contributing_nodes)?;
        map.serialize_entry("partial", &self.partial)?;
        map.serialize_entry("codec", &self.codec)?;
        map.end()
    }
}

/// Hex of the first 16 bytes of SHA-256.
pub fn content_digest(bytes: &[u8]) -> String {
    use core::fmt::Write as _;
    let hash = Sha256::digest(bytes);
    let mut out = String::with_capacity(32);
    for b in &hash[..16] {
        let _ = write!(out, "{b:02x}");
    }
    out
}
