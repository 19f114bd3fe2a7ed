//! In-process transformer functions with per-name instance counting.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::NodeError;
use crate::model::{FieldSet, Payload, SensorReading, Summary, TransformerSpec};
use crate::wire::encode_readings;

pub const IDENTITY: &str = "identity";
pub const DOWNSAMPLE: &str = "downsample";
pub const AGGREGATE_MEAN: &str = "aggregate_mean";
pub const BUILTINS: [&str; 3] = [IDENTITY, DOWNSAMPLE, AGGREGATE_MEAN];

/// Input is in canonical order; `fields` is the request projection.
pub type TransformFn = fn(&[SensorReading], &TransformerSpec, FieldSet) -> Result<Payload, NodeError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransformerStats {
    pub active: u32,
    pub peak: u32,
    pub invocations: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TransformerRegistry {
    functions: BTreeMap<String, TransformFn>,
    stats: BTreeMap<String, TransformerStats>,
}

fn identity(input: &[SensorReading], _: &TransformerSpec, _: FieldSet) -> Result<Payload, NodeError> {
    Ok(Payload::Readings(input.to_vec()))
}

fn downsample(input: &[SensorReading], spec: &TransformerSpec, _: FieldSet) -> Result<Payload, NodeError> {
    let invalid = |reason: &str| NodeError::InvalidParam {
        transformer: spec.name.clone(),
        param: "k".to_string(),
        reason: reason.to_string(),
    };
    let k: usize = spec
        .params
        .get("k")
        .ok_or_else(|| invalid("missing"))?
        .parse()
        .map_err(|_| invalid("not a positive integer"))?;
    if k == 0 {
        return Err(invalid("must be at least 1"));
    }
    Ok(Payload::Readings(input.iter().step_by(k).cloned().collect()))
}

fn aggregate_mean(input: &[SensorReading], _: &TransformerSpec, fields: FieldSet) -> Result<Payload, NodeError> {
    Ok(Payload::Summary(Summary::over(input, fields)))
}

fn builtin(name: &str) -> Option<TransformFn> {
    match name {
        IDENTITY => Some(identity),
        DOWNSAMPLE => Some(downsample),
        AGGREGATE_MEAN => Some(aggregate_mean),
        _ => None,
    }
}

impl TransformerRegistry {
    pub fn with_builtins() -> Self {
        let mut r = TransformerRegistry::default();
        for name in BUILTINS {
            r.register(name, builtin(name).unwrap());
        }
        r
    }

    /// Registry holding the named built-ins; fails on the first unknown name.
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self, NodeError> {
        let mut r = TransformerRegistry::default();
        for name in names {
            let f = builtin(name).ok_or_else(|| NodeError::TransformerUnknown(name.to_string()))?;
            r.register(name, f);
        }
        Ok(r)
    }

    pub fn register(&mut self, name: &str, f: TransformFn) {
        self.functions.insert(name.to_string(), f);
        self.stats.entry(name.to_string()).or_default();
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.functions.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.functions.contains_key(name)
    }

    pub fn stats(&self, name: &str) -> Option<TransformerStats> {
        self.stats.get(name).copied()
    }

    /// Sum of active instances over every transformer.
    pub fn active(&self) -> u32 {
        self.stats.values().map(|s| s.active).sum()
    }

    /// Runs one instance of `spec.name` for the duration of the call.
    pub fn run(
        &mut self,
        spec: &TransformerSpec,
        input: &[SensorReading],
        fields: FieldSet,
    ) -> Result<Payload, NodeError> {
        let f = *self.functions.get(&spec.name).ok_or_else(|| NodeError::TransformerUnknown(spec.name.clone()))?;
        let stats = self.stats.get_mut(&spec.name).unwrap();
        stats.active += 1;
        stats.peak = stats.peak.max(stats.active);
        stats.invocations += 1;
        let out = f(input, spec, fields);
        self.stats.get_mut(&spec.name).unwrap().active -= 1;
        out
    }
}

/// Byte encoding of a transformer result: a reading array for reading
/// payloads, the JSON object otherwise.
pub fn payload_bytes(payload: &Payload, fields: FieldSet) -> Vec<u8> {
    match payload {
        Payload::Readings(r) => encode_readings(r, fields),
        Payload::Summary(s) => serde_json::to_vec(s).expect("summary serialization is infallible"),
        Payload::Error(e) => serde_json::to_vec(e).expect("error serialization is infallible"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::arb_reading;
    use crate::model::NodeId;
    use crate::model::{canonicalize, Field, TimeRange};
    use crate::store::LocalStore;
    use proptest::prelude::*;

    fn readings(n: usize) -> Vec<SensorReading> {
        (0..n)
            .map(|i| SensorReading {
                node_id: NodeId::new("node-0"),
                sensor_id: crate::model::SensorId::new("s"),
                timestamp: crate::model::Timestamp(i as u64 * 10),
                geo: Some(crate::model::Geo { lat: 1.0, lon: 2.0 }),
                p1: Some(i as f64),
                p2: Some(1.0),
                temperature: Some(20.0),
                humidity: Some(50.0),
                pressure: None,
            })
            .collect()
    }

    #[test]
    fn identity_encodes_the_same_set() {
        let mut reg = TransformerRegistry::with_builtins();
        let input = readings(7);
        let out = reg.run(&TransformerSpec::new(IDENTITY), &input, FieldSet::ALL).unwrap();
        assert_eq!(payload_bytes(&out, FieldSet::ALL), encode_readings(&input, FieldSet::ALL));
    }

    #[test]
    fn downsample_keeps_every_kth() {
        let mut reg = TransformerRegistry::with_builtins();
        let input = readings(10);
        let spec = TransformerSpec::new(DOWNSAMPLE).with_param("k", "2");
        let out = reg.run(&spec, &input, FieldSet::ALL).unwrap();
        let ts: Vec<u64> = out.readings().unwrap().iter().map(|r| r.timestamp.0).collect();
        assert_eq!(ts, [0, 20, 40, 60, 80]);
    }

    #[test]
    fn downsample_rejects_bad_k() {
        let mut reg = TransformerRegistry::with_builtins();
        for k in ["0", "x", "-1"] {
            let spec = TransformerSpec::new(DOWNSAMPLE).with_param("k", k);
            assert!(matches!(reg.run(&spec, &[], FieldSet::ALL), Err(NodeError::InvalidParam { .. })));
        }
        assert!(matches!(
            reg.run(&TransformerSpec::new(DOWNSAMPLE), &[], FieldSet::ALL),
            Err(NodeError::InvalidParam { .. })
        ));
        assert_eq!(reg.active(), 0);
    }

    #[test]
    fn unknown_names_are_reported() {
        let mut reg = TransformerRegistry::with_builtins();
        assert_eq!(
            reg.run(&TransformerSpec::new("nope"), &[], FieldSet::ALL),
            Err(NodeError::TransformerUnknown("nope".into()))
        );
        assert!(TransformerRegistry::from_names(["identity", "nope"]).is_err());
        let only = TransformerRegistry::from_names(["identity"]).unwrap();
        assert!(!only.contains(AGGREGATE_MEAN));
    }

    #[test]
    fn instances_scale_to_zero() {
        let mut reg = TransformerRegistry::with_builtins();
        reg.run(&TransformerSpec::new(AGGREGATE_MEAN), &readings(3), FieldSet::ALL).unwrap();
        reg.run(&TransformerSpec::new(AGGREGATE_MEAN), &readings(3), FieldSet::ALL).unwrap();
        let s = reg.stats(AGGREGATE_MEAN).unwrap();
        assert_eq!((s.active, s.peak, s.invocations), (0, 1, 2));
        assert_eq!(reg.active(), 0);
    }

    proptest! {
        #[test]
        fn aggregate_mean_matches_naive_sum(rs in proptest::collection::vec(arb_reading(), 0..60)) {
            let mut rs = rs;
            canonicalize(&mut rs);
            let store = LocalStore::with_readings(NodeId::new("n"), rs.iter().filter(|r| r.validate().is_ok()).cloned()).unwrap();
            let input = store.query(TimeRange::new(0, u64::MAX).unwrap(), FieldSet::ALL);
            let mut reg = TransformerRegistry::with_builtins();
            let out = reg.run(&TransformerSpec::new(AGGREGATE_MEAN), &input, FieldSet::ALL).unwrap();
            let got = out.summary().unwrap();
            for f in Field::NUMERIC {
                let vals: Vec<f64> = input.iter().filter_map(|r| r.numeric(f)).collect();
                let s = got.get(f).unwrap();
                prop_assert_eq!(s.count as usize, vals.len());
                if !vals.is_empty() {
                    let mut naive = 0.0;
                    for v in &vals { naive += v; }
                    let mean = naive / vals.len() as f64;
                    let m = s.mean().unwrap();
                    prop_assert!((m - mean).abs() <= 1e-9 * mean.abs().max(1.0));
                }
            }
            prop_assert_eq!(reg.active(), 0);
        }
    }
}
