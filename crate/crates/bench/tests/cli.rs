use std::path::Path;
use std::process::{Command, Output};

use syncmesh_bench::dataset::ingest_csv;
use syncmesh_bench::export::{read_csv, read_json, CSV_COLUMNS};

/// Runs the binary with `cmd` split on whitespace followed by `paths`.
fn bench(cmd: &str, paths: &[(&str, &Path)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bench"));
    c.args(cmd.split_whitespace());
    for (flag, p) in paths {
        c.arg(flag).arg(p);
    }
    c.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&bench("--help", &[])), 0);
    assert_eq!(code(&bench("run --help", &[])), 0);
}

#[test]
fn run_writes_repetitions_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let res = bench("run --system central --scenario collect --nodes 3 --days 1 --reps 2", &[("--out", &out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let rows = read_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].is_summary());
}

#[test]
fn run_exports_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let cmd = "run --system SYNCMESH --scenario transform --nodes 3 --days 7 --reps 1 --format json";
    let res = bench(cmd, &[("--out", &out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let results = read_json(std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].repetitions.len(), 1);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    for cmd in [
        "run --system mongo --scenario collect --nodes 3 --days 1",
        "run --system central --scenario collect --nodes 4 --days 1",
        "run --system central --scenario collect --nodes 3 --days 2",
        "run --system central --scenario collect --nodes 0 --days 1 --unsafe-params",
        "gen --sensors 0 --days 1 --rate 1",
    ] {
        assert_eq!(code(&bench(cmd, &[("--out", &out)])), 1, "{cmd}");
    }
    assert_eq!(code(&bench("frobnicate", &[])), 1);
}

#[test]
fn unsafe_params_allow_off_matrix_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let cmd = "run --system sharded --scenario collect --nodes 4 --days 2 --reps 1 --unsafe-params";
    let res = bench(cmd, &[("--out", &out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
}

#[test]
fn io_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let bad_out = dir.path().join("no/such/dir/r.csv");
    let ok_out = dir.path().join("r.csv");
    let run = "run --system central --scenario collect --nodes 3 --days 1 --reps 1";
    assert_eq!(code(&bench(run, &[("--dataset", &missing), ("--out", &ok_out)])), 2);
    assert_eq!(code(&bench(run, &[("--out", &bad_out)])), 2);
    assert_eq!(code(&bench("gen --sensors 1 --days 1 --rate 1", &[("--out", &bad_out)])), 2);
}

#[test]
fn gen_is_deterministic_and_ingests_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        assert_eq!(code(&bench("gen --sensors 5 --days 2 --rate 24 --seed 3", &[("--out", p)])), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (manifest, parts) = ingest_csv(&a, 3).unwrap();
    assert_eq!((manifest.rows, manifest.malformed, manifest.duplicates), (5 * 2 * 24, 0, 0));
    assert_eq!(parts.iter().map(|p| p.len() as u64).sum::<u64>(), 240);
}

#[test]
fn csv_dataset_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample.csv");
    let cmd = "run --system p2p --scenario collect --nodes 3 --days 1 --reps 1";
    let res = bench(cmd, &[("--dataset", &data), ("--out", &out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let rows = read_csv(std::fs::File::open(&out).unwrap()).unwrap();
    assert!(rows[0].bytes_client > 0.0);
}
