//! CSV and JSON export of scenario results.
//!
//! Each configuration yields one row per repetition followed by a summary row
//! whose `rep` is `summary`: numeric columns hold means across repetitions,
//! `request_time_std_ms` the sample standard deviation, `partial` whether any
//! repetition was partial and `digest` the shared digest (empty if they differ).

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use syncmesh_core::experiment::{ScenarioKind, SystemKind};

use crate::scenario::{Repetition, ScenarioResult};

pub const CSV_COLUMNS: [&str; 16] = [
    "system",
    "scenario",
    "n_nodes",
    "window_days",
    "rep",
    "request_time_ms",
    "ingest_time_ms",
    "bytes_client",
    "bytes_internal",
    "bytes_server",
    "partial",
    "digest",
    "ingest_bytes_client",
    "ingest_bytes_internal",
    "ingest_bytes_server",
    "request_time_std_ms",
];

pub const SUMMARY_REP: &str = "summary";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// One exported CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub system: SystemKind,
    pub scenario: ScenarioKind,
    pub n_nodes: usize,
    pub window_days: u64,
    /// Repetition index or [`SUMMARY_REP`].
    pub rep: String,
    pub request_time_ms: f64,
    pub ingest_time_ms: f64,
    pub bytes_client: f64,
    pub bytes_internal: f64,
    pub bytes_server: f64,
    pub partial: bool,
    pub digest: String,
    pub ingest_bytes_client: f64,
    pub ingest_bytes_internal: f64,
    pub ingest_bytes_server: f64,
    pub request_time_std_ms: Option<f64>,
}

impl ExportRow {
    pub fn is_summary(&self) -> bool {
        self.rep == SUMMARY_REP
    }

    pub fn bytes_total(&self) -> f64 {
        self.bytes_client + self.bytes_internal + self.bytes_server
    }

    fn record(&self) -> [String; 16] {
        [
            self.system.to_string(),
            self.scenario.to_string(),
            self.n_nodes.to_string(),
            self.window_days.to_string(),
            self.rep.clone(),
            self.request_time_ms.to_string(),
            self.ingest_time_ms.to_string(),
            self.bytes_client.to_string(),
            self.bytes_internal.to_string(),
            self.bytes_server.to_string(),
            self.partial.to_string(),
            self.digest.clone(),
            self.ingest_bytes_client.to_string(),
            self.ingest_bytes_internal.to_string(),
            self.ingest_bytes_server.to_string(),
            self.request_time_std_ms.map(|v| v.to_string()).unwrap_or_default(),
        ]
    }
}

fn base_row(res: &ScenarioResult, rep: String) -> ExportRow {
    ExportRow {
        system: res.config.system,
        scenario: res.config.scenario,
        n_nodes: res.config.n_nodes,
        window_days: res.config.window_days,
        rep,
        request_time_ms: 0.0,
        ingest_time_ms: 0.0,
        bytes_client: 0.0,
        bytes_internal: 0.0,
        bytes_server: 0.0,
        partial: false,
        digest: String::new(),
        ingest_bytes_client: 0.0,
        ingest_bytes_internal: 0.0,
        ingest_bytes_server: 0.0,
        request_time_std_ms: None,
    }
}

/// Sets the numeric columns to means over `reps`.
fn fill_means(row: &mut ExportRow, reps: &[Repetition]) {
    let n = reps.len() as f64;
    let mean = |f: fn(&Repetition) -> u64| reps.iter().map(|r| f(r) as f64).sum::<f64>() / n;
    row.request_time_ms = mean(|r| r.request_time_ms);
    row.ingest_time_ms = mean(|r| r.ingest_time_ms);
    row.bytes_client = mean(|r| r.traffic.client);
    row.bytes_internal = mean(|r| r.traffic.internal);
    row.bytes_server = mean(|r| r.traffic.server);
    row.ingest_bytes_client = mean(|r| r.ingest_traffic.client);
    row.ingest_bytes_internal = mean(|r| r.ingest_traffic.internal);
    row.ingest_bytes_server = mean(|r| r.ingest_traffic.server);
}

/// Repetition rows then the summary row, per result, in input order.
pub fn to_rows(results: &[ScenarioResult]) -> Vec<ExportRow> {
    let mut rows = Vec::new();
    for res in results {
        for r in &res.repetitions {
            let mut row = base_row(res, r.rep.to_string());
            fill_means(&mut row, std::slice::from_ref(r));
            row.partial = r.partial;
            row.digest = r.digest.clone();
            rows.push(row);
        }
        let mut summary = base_row(res, SUMMARY_REP.to_string());
        if !res.repetitions.is_empty() {
            fill_means(&mut summary, &res.repetitions);
        }
        summary.partial = res.repetitions.iter().any(|r| r.partial);
        summary.digest = res.digest().unwrap_or_default().to_string();
        summary.request_time_std_ms = Some(res.request_time_std_ms());
        rows.push(summary);
    }
    rows
}

pub fn write_csv(rows: &[ExportRow], out: impl Write) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()
}

pub fn read_csv(input: impl Read) -> Result<Vec<ExportRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn write_json(results: &[ScenarioResult], out: impl Write) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    serde_json::to_writer_pretty(&mut out, results)?;
    out.write_all(b"\n")?;
    out.flush()
}

pub fn read_json(input: impl Read) -> serde_json::Result<Vec<ScenarioResult>> {
    serde_json::from_reader(input)
}

/// Writes `results` to `path` in `format`.
pub fn export_results(results: &[ScenarioResult], format: Format, path: &Path) -> io::Result<()> {
    let file = BufWriter::new(File::create(path)?);
    match format {
        Format::Csv => write_csv(&to_rows(results), file),
        Format::Json => write_json(results, file),
    }
}
