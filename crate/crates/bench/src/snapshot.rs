//! Store snapshots: one canonical-JSON reading per line, LF-terminated, in
//! timestamp order.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use syncmesh_core::model::{NodeId, SensorReading};
use syncmesh_core::store::{InsertOutcome, LocalStore};

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: reading is already present")]
    Duplicate { line: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_snapshot(store: &LocalStore, out: impl Write) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    for r in store.iter() {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Loads a snapshot into a fresh store owned by `node_id`. Blank lines are
/// skipped; anything else that does not parse is an error.
pub fn read_snapshot(input: impl io::Read, node_id: NodeId) -> Result<LocalStore, SnapshotError> {
    let mut store = LocalStore::new(node_id);
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| SnapshotError::Parse { line: i + 1, message };
        let reading: SensorReading = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        match store.insert(reading).map_err(|e| parse_err(e.to_string()))? {
            InsertOutcome::Inserted(_) => {}
            InsertOutcome::Duplicate => return Err(SnapshotError::Duplicate { line: i + 1 }),
        }
    }
    Ok(store)
}

pub fn save(store: &LocalStore, path: &Path) -> io::Result<()> {
    write_snapshot(store, File::create(path)?)
}

pub fn load(path: &Path, node_id: NodeId) -> Result<LocalStore, SnapshotError> {
    read_snapshot(File::open(path)?, node_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_partitions, SyntheticSpec};

    fn sample() -> LocalStore {
        let spec = SyntheticSpec { sensors: 2, days: 1, readings_per_day: 24, seed: 3 };
        synthetic_partitions(spec, 1).unwrap().1.remove(0)
    }

    #[test]
    fn round_trips_through_a_file() {
        let store = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("node-0.jsonl");
        save(&store, &path).unwrap();
        let back = load(&path, store.node_id().clone()).unwrap();
        assert!(store.iter().eq(back.iter()));
    }

    #[test]
    fn lines_are_timestamp_ascending_and_lf_terminated() {
        let mut buf = Vec::new();
        write_snapshot(&sample(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.ends_with('\n') && !text.contains('\r'));
        let ts: Vec<u64> =
            text.lines().map(|l| serde_json::from_str::<SensorReading>(l).unwrap().timestamp.0).collect();
        assert_eq!(ts.len(), 48);
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn same_store_gives_identical_bytes() {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_snapshot(&sample(), &mut a).unwrap();
        write_snapshot(&sample(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_line_reports_its_number() {
        let mut buf = Vec::new();
        write_snapshot(&sample(), &mut buf).unwrap();
        buf.extend_from_slice(b"{not json}\n");
        match read_snapshot(buf.as_slice(), NodeId::new("node-0")) {
            Err(SnapshotError::Parse { line, .. }) => assert_eq!(line, 49),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repeated_reading_is_rejected() {
        let mut buf = Vec::new();
        write_snapshot(&sample(), &mut buf).unwrap();
        let first = buf.split(|b| *b == b'\n').next().unwrap().to_vec();
        buf.extend_from_slice(&first);
        assert!(matches!(
            read_snapshot(buf.as_slice(), NodeId::new("node-0")),
            Err(SnapshotError::Duplicate { line: 49 })
        ));
    }
}
