//! Sensor CSV ingestion, node partitioning and synthetic data generation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use syncmesh_core::model::{Geo, Millis, NodeId, SensorId, SensorReading, Timestamp, DAY_MS};
use syncmesh_core::store::{InsertOutcome, LocalStore};
use syncmesh_core::wire::EndpointId;

pub const REQUIRED_COLUMNS: [&str; 8] = ["sensor_id", "lat", "lon", "timestamp", "P1", "P2", "temperature", "humidity"];
pub const OPTIONAL_COLUMNS: [&str; 1] = ["pressure"];

/// 2021-01-01T00:00:00Z, the first synthetic timestamp.
pub const SYNTHETIC_EPOCH_MS: Millis = 1_609_459_200_000;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("dataset contains no readings")]
    EmptyDataset,
    #[error("{0} must be positive")]
    InvalidCount(&'static str),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: PathBuf,
    /// Rows accepted into a node store.
    pub rows: u64,
    pub malformed: u64,
    /// Rows whose (sensor, timestamp) was already present.
    pub duplicates: u64,
    pub first_timestamp: Option<u64>,
    pub last_timestamp: Option<u64>,
    pub partition_counts: Vec<u64>,
}

impl DatasetManifest {
    pub fn span_ms(&self) -> u64 {
        match (self.first_timestamp, self.last_timestamp) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        }
    }
}

/// Node index for a sensor. Numeric ids are taken modulo `n_nodes` so that
/// consecutive ids spread evenly; other ids go through 64-bit FNV-1a.
pub fn partition(sensor_id: &str, n_nodes: usize) -> usize {
    assert!(n_nodes > 0, "at least one node");
    let h = match sensor_id.trim().parse::<u64>() {
        Ok(v) => v,
        Err(_) => sensor_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3)),
    };
    (h % n_nodes as u64) as usize
}

/// Epoch seconds, epoch milliseconds, RFC 3339, or a naive ISO date-time
/// taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<u64>() {
        // below 1e11 the value can only be seconds for any date after 1973
        return Some(if v < 100_000_000_000 { v * 1000 } else { v });
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return u64::try_from(dt.timestamp_millis()).ok();
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .and_then(|dt| u64::try_from(dt.and_utc().timestamp_millis()).ok())
}

fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

struct Columns {
    idx: [usize; 8],
    pressure: Option<usize>,
}

fn columns(headers: &csv::StringRecord) -> Result<Columns, DatasetError> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0; 8];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = find(name).ok_or_else(|| DatasetError::MissingColumn(name.to_string()))?;
    }
    Ok(Columns { idx, pressure: find(OPTIONAL_COLUMNS[0]) })
}

fn parse_row(row: &csv::StringRecord, c: &Columns, node: &NodeId) -> Option<SensorReading> {
    let get = |i: usize| row.get(c.idx[i]);
    let sensor = get(0)?.trim();
    if sensor.is_empty() {
        return None;
    }
    let pressure = match c.pressure.and_then(|i| row.get(i)).map(str::trim) {
        None | Some("") => None,
        Some(v) => Some(parse_f64(v)?),
    };
    let reading = SensorReading {
        node_id: node.clone(),
        sensor_id: SensorId::new(sensor),
        timestamp: Timestamp(parse_timestamp(get(3)?)?),
        geo: Some(Geo { lat: parse_f64(get(1)?)?, lon: parse_f64(get(2)?)? }),
        p1: Some(parse_f64(get(4)?)?),
        p2: Some(parse_f64(get(5)?)?),
        temperature: Some(parse_f64(get(6)?)?),
        humidity: Some(parse_f64(get(7)?)?),
        pressure,
    };
    reading.validate().ok().map(|_| reading)
}

/// Node store names, `node-0` .. `node-{n-1}`.
pub fn node_ids(n_nodes: usize) -> Vec<NodeId> {
    (0..n_nodes).map(|i| NodeId::new(EndpointId::node(i).as_str())).collect()
}

/// Parses CSV from `input` and distributes readings over `n_nodes` stores.
pub fn ingest_reader(
    input: impl Read,
    source: impl Into<PathBuf>,
    n_nodes: usize,
) -> Result<(DatasetManifest, Vec<LocalStore>), DatasetError> {
    if n_nodes == 0 {
        return Err(DatasetError::InvalidCount("n_nodes"));
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::None).from_reader(input);
    let cols = columns(rdr.headers()?)?;
    let ids = node_ids(n_nodes);
    let mut stores: Vec<LocalStore> = ids.iter().cloned().map(LocalStore::new).collect();
    let mut manifest = DatasetManifest {
        source: source.into(),
        rows: 0,
        malformed: 0,
        duplicates: 0,
        first_timestamp: None,
        last_timestamp: None,
        partition_counts: vec![0; n_nodes],
    };
    let mut row = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                manifest.malformed += 1;
                continue;
            }
        }
        let node = row.get(cols.idx[0]).map(|s| partition(s.trim(), n_nodes));
        let Some(reading) = node.and_then(|n| parse_row(&row, &cols, &ids[n])) else {
            manifest.malformed += 1;
            continue;
        };
        let n = node.unwrap();
        let ts = reading.timestamp.0;
        match stores[n].insert(reading) {
            Ok(InsertOutcome::Inserted(_)) => {
                manifest.rows += 1;
                manifest.partition_counts[n] += 1;
                manifest.first_timestamp = Some(manifest.first_timestamp.map_or(ts, |t| t.min(ts)));
                manifest.last_timestamp = Some(manifest.last_timestamp.map_or(ts, |t| t.max(ts)));
            }
            Ok(InsertOutcome::Duplicate) => manifest.duplicates += 1,
            Err(_) => manifest.malformed += 1,
        }
    }
    if manifest.rows == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    Ok((manifest, stores))
}

pub fn ingest_csv(path: &Path, n_nodes: usize) -> Result<(DatasetManifest, Vec<LocalStore>), DatasetError> {
    ingest_reader(File::open(path)?, path, n_nodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sensors: u64,
    pub days: u64,
    pub readings_per_day: u64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn rows(&self) -> u64 {
        self.sensors * self.days * self.readings_per_day
    }

    fn check(&self) -> Result<(), DatasetError> {
        for (v, name) in [(self.sensors, "sensors"), (self.days, "days"), (self.readings_per_day, "rate")] {
            if v == 0 {
                return Err(DatasetError::InvalidCount(name));
            }
        }
        if self.readings_per_day > DAY_MS {
            return Err(DatasetError::InvalidCount("rate"));
        }
        Ok(())
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Writes a deterministic CSV with one reading per sensor per interval,
/// sensors numbered `0..sensors`. Values follow a daily temperature cycle,
/// humidity moving against it, and log-normal particulate matter.
pub fn write_synthetic(spec: SyntheticSpec, out: impl Write) -> Result<u64, DatasetError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let step = DAY_MS / spec.readings_per_day;
    let sites: Vec<(f64, f64, f64)> = (0..spec.sensors)
        .map(|_| {
            let lat = (rng.random_range(42.62..42.75) * 1e4_f64).round() / 1e4;
            let lon = (rng.random_range(23.22..23.42) * 1e4_f64).round() / 1e4;
            (lat, lon, rng.random_range(-2.0..2.0))
        })
        .collect();
    let noise = Normal::new(0.0, 1.5).unwrap();
    let pm = LogNormal::new(2.6, 0.55).unwrap();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REQUIRED_COLUMNS)?;
    let mut rows = 0;
    for day in 0..spec.days {
        let season = 8.0 * (day as f64 / 30.0).min(1.0);
        for slot in 0..spec.readings_per_day {
            let ts = SYNTHETIC_EPOCH_MS + day * DAY_MS + slot * step;
            let hour = (slot * step) as f64 / 3_600_000.0;
            let cycle = (core::f64::consts::TAU * (hour - 9.0) / 24.0).sin();
            for (i, (lat, lon, bias)) in sites.iter().enumerate() {
                let temp = (10.0 + season + 7.0 * cycle + bias + noise.sample(&mut rng)).clamp(-10.0, 40.0);
                let hum = (60.0 - 15.0 * cycle + 4.0 * noise.sample(&mut rng)).clamp(0.0, 100.0);
                let p1: f64 = pm.sample(&mut rng);
                let p2 = p1 * rng.random_range(0.35..0.75);
                w.write_record([
                    i.to_string(),
                    format!("{lat}"),
                    format!("{lon}"),
                    ts.to_string(),
                    format!("{:.2}", round2(p1).max(0.01)),
                    format!("{:.2}", round2(p2).max(0.01)),
                    format!("{:.2}", round2(temp)),
                    format!("{:.2}", round2(hum)),
                ])?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    Ok(rows)
}

pub fn generate_synthetic(spec: SyntheticSpec) -> Result<Vec<u8>, DatasetError> {
    let mut buf = Vec::new();
    write_synthetic(spec, &mut buf)?;
    Ok(buf)
}

/// Stores for a synthetic dataset, generated in memory.
pub fn synthetic_partitions(
    spec: SyntheticSpec,
    n_nodes: usize,
) -> Result<(DatasetManifest, Vec<LocalStore>), DatasetError> {
    let csv = generate_synthetic(spec)?;
    ingest_reader(csv.as_slice(), "synthetic", n_nodes)
}

/// Per-node partition counts keyed by node index, for display.
pub fn partition_table(m: &DatasetManifest) -> BTreeMap<String, u64> {
    m.partition_counts.iter().enumerate().map(|(i, c)| (EndpointId::node(i).as_str().to_string(), *c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sensors: u64, days: u64, rate: u64, seed: u64) -> SyntheticSpec {
        SyntheticSpec { sensors, days, readings_per_day: rate, seed }
    }

    #[test]
    fn synthetic_row_count_is_the_product() {
        let csv = generate_synthetic(spec(10, 30, 48, 1)).unwrap();
        let lines = csv.iter().filter(|b| **b == b'\n').count();
        assert_eq!(lines, 14_400 + 1);
    }

    #[test]
    fn synthetic_is_byte_identical_per_seed() {
        assert_eq!(generate_synthetic(spec(3, 2, 24, 9)).unwrap(), generate_synthetic(spec(3, 2, 24, 9)).unwrap());
        assert_ne!(generate_synthetic(spec(3, 2, 24, 9)).unwrap(), generate_synthetic(spec(3, 2, 24, 10)).unwrap());
    }

    #[test]
    fn synthetic_values_stay_in_bounds() {
        let (_, stores) = synthetic_partitions(spec(5, 3, 48, 3), 2).unwrap();
        for r in stores.iter().flat_map(|s| s.iter()) {
            assert!((-10.0..=40.0).contains(&r.temperature.unwrap()));
            assert!((0.0..=100.0).contains(&r.humidity.unwrap()));
            assert!(r.p1.unwrap() > 0.0 && r.p2.unwrap() > 0.0);
        }
    }

    #[test]
    fn synthetic_ingests_without_malformed_rows() {
        let (m, _) = synthetic_partitions(spec(4, 2, 48, 5), 3).unwrap();
        assert_eq!((m.rows, m.malformed, m.duplicates), (384, 0, 0));
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(matches!(generate_synthetic(spec(0, 1, 1, 0)), Err(DatasetError::InvalidCount("sensors"))));
        assert!(matches!(generate_synthetic(spec(1, 0, 1, 0)), Err(DatasetError::InvalidCount("days"))));
        assert!(matches!(generate_synthetic(spec(1, 1, 0, 0)), Err(DatasetError::InvalidCount("rate"))));
    }

    #[test]
    fn header_only_is_empty() {
        let csv = "sensor_id,lat,lon,timestamp,P1,P2,temperature,humidity\n";
        assert!(matches!(ingest_reader(csv.as_bytes(), "x", 2), Err(DatasetError::EmptyDataset)));
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "sensor_id,lat,lon,timestamp,P1,P2,temperature\n1,1,1,1,1,1,1\n";
        match ingest_reader(csv.as_bytes(), "x", 2) {
            Err(DatasetError::MissingColumn(c)) => assert_eq!(c, "humidity"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_are_counted_and_skipped() {
        let csv = "sensor_id,lat,lon,timestamp,P1,P2,temperature,humidity,pressure\n\
                   1,42.1,23.3,1609459200,10,5,20,50,\n\
                   2,42.1,23.3,not-a-time,10,5,20,50,\n\
                   3,42.1,23.3,2021-01-01T00:30:00Z,10,5,20,x,\n\
                   4,42.1,23.3,2021-01-01T01:00:00,10,5,20,50,95000\n\
                   5,42.1\n";
        let (m, stores) = ingest_reader(csv.as_bytes(), "x", 2).unwrap();
        assert_eq!((m.rows, m.malformed), (2, 3));
        let all: Vec<_> = stores.iter().flat_map(|s| s.iter()).collect();
        assert!(all.iter().any(|r| r.pressure == Some(95000.0)));
        assert!(all.iter().any(|r| r.timestamp.0 == 1_609_459_200_000));
    }

    #[test]
    fn timestamps_in_every_supported_format() {
        let ms = 1_609_459_200_000;
        assert_eq!(parse_timestamp("1609459200"), Some(ms));
        assert_eq!(parse_timestamp("1609459200000"), Some(ms));
        assert_eq!(parse_timestamp("2021-01-01T00:00:00Z"), Some(ms));
        assert_eq!(parse_timestamp("2021-01-01T02:00:00+02:00"), Some(ms));
        assert_eq!(parse_timestamp("2021-01-01T00:00:00.5"), Some(ms + 500));
        assert_eq!(parse_timestamp("2021-01-01 00:00:00"), Some(ms));
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn partitions_conserve_rows_and_keep_sensors_together() {
        let csv = generate_synthetic(spec(10, 5, 20, 2)).unwrap();
        let (a, sa) = ingest_reader(csv.as_slice(), "x", 4).unwrap();
        let (b, _) = ingest_reader(csv.as_slice(), "x", 4).unwrap();
        assert_eq!(a.partition_counts.iter().sum::<u64>(), 1000);
        assert_eq!(a, b);
        for (i, s) in sa.iter().enumerate() {
            assert!(s.iter().all(|r| partition(r.sensor_id.as_str(), 4) == i));
        }
    }

    #[test]
    fn numeric_ids_spread_round_robin() {
        let counts = (0..12).fold([0; 3], |mut c, i| {
            c[partition(&i.to_string(), 3)] += 1;
            c
        });
        assert_eq!(counts, [4, 4, 4]);
        assert!(partition("sensor-x", 5) < 5);
    }
}
