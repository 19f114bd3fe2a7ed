//! Benchmark configurations, their repetitions, and the full experiment
//! matrix.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use syncmesh_core::experiment::{run_repetition, ExperimentError, RunReport, RunSpec, ScenarioKind, SystemKind};
use syncmesh_core::model::Millis;
use syncmesh_core::netsim::{LinkClass, TrafficLedger};
use syncmesh_core::store::LocalStore;

use crate::dataset::{ingest_csv, synthetic_partitions, DatasetError, DatasetManifest, SyntheticSpec};

pub const NODE_COUNTS: [usize; 4] = [3, 6, 9, 12];
pub const WINDOW_DAYS: [u64; 4] = [1, 7, 14, 30];
pub const DEFAULT_REPETITIONS: u32 = 20;
/// Access-link capacity of every endpoint, roughly 8.8 Mbit/s.
pub const DEFAULT_BANDWIDTH_BYTES_PER_MS: u64 = 1100;
/// Leaves room for transmission on top of the round trip at the default
/// bandwidth.
pub const DEFAULT_GATHER_TIMEOUT_MS: Millis = 5000;
pub const SYNTHETIC_DAYS: u64 = 30;
pub const SYNTHETIC_READINGS_PER_DAY: u64 = 48;

/// Where readings come from. Serialized as a path or the word `synthetic`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum DatasetSource {
    /// One sensor per node, 30 days at 48 readings a day.
    #[default]
    Synthetic,
    Csv(PathBuf),
}

impl From<String> for DatasetSource {
    fn from(s: String) -> Self {
        if s == "synthetic" {
            DatasetSource::Synthetic
        } else {
            DatasetSource::Csv(s.into())
        }
    }
}

impl From<DatasetSource> for String {
    fn from(d: DatasetSource) -> String {
        d.to_string()
    }
}

impl FromStr for DatasetSource {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(s.to_string().into())
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::Synthetic => f.write_str("synthetic"),
            DatasetSource::Csv(p) => write!(f, "{}", p.display()),
        }
    }
}

impl DatasetSource {
    /// Loads and partitions the data over `n_nodes` stores. Synthetic data is
    /// generated from `seed` with one sensor per node.
    pub fn load(&self, n_nodes: usize, seed: u64) -> Result<(DatasetManifest, Vec<LocalStore>), DatasetError> {
        match self {
            DatasetSource::Synthetic => synthetic_partitions(
                SyntheticSpec {
                    sensors: n_nodes as u64,
                    days: SYNTHETIC_DAYS,
                    readings_per_day: SYNTHETIC_READINGS_PER_DAY,
                    seed,
                },
                n_nodes,
            ),
            DatasetSource::Csv(path) => ingest_csv(path, n_nodes),
        }
    }
}

fn default_repetitions() -> u32 {
    DEFAULT_REPETITIONS
}

fn default_bandwidth() -> Option<u64> {
    Some(DEFAULT_BANDWIDTH_BYTES_PER_MS)
}

fn default_gather_timeout() -> Option<Millis> {
    Some(DEFAULT_GATHER_TIMEOUT_MS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub system: SystemKind,
    pub scenario: ScenarioKind,
    pub n_nodes: usize,
    pub window_days: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSource,
    /// `None` means unlimited.
    #[serde(default = "default_bandwidth")]
    pub bandwidth_bytes_per_ms: Option<u64>,
    /// Applies to the mesh coordinator and the shard router; `None` derives it
    /// from the sampled latencies.
    #[serde(default = "default_gather_timeout")]
    pub gather_timeout_ms: Option<Millis>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

impl ScenarioError {
    fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        ScenarioError::Invalid { field, message: message.into() }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, ScenarioError::Dataset(DatasetError::Io(_) | DatasetError::Csv(_)))
    }
}

impl ScenarioConfig {
    pub fn new(system: SystemKind, scenario: ScenarioKind, n_nodes: usize, window_days: u64, seed: u64) -> Self {
        ScenarioConfig {
            system,
            scenario,
            n_nodes,
            window_days,
            repetitions: DEFAULT_REPETITIONS,
            seed,
            dataset: DatasetSource::Synthetic,
            bandwidth_bytes_per_ms: default_bandwidth(),
            gather_timeout_ms: default_gather_timeout(),
        }
    }

    /// Node counts and windows must come from the experiment matrix unless
    /// `unsafe_params` is set; counts must be positive either way.
    pub fn validate(&self, unsafe_params: bool) -> Result<(), ScenarioError> {
        if self.n_nodes == 0 {
            return Err(ScenarioError::invalid("n_nodes", "must be positive"));
        }
        if self.window_days == 0 {
            return Err(ScenarioError::invalid("window_days", "must be positive"));
        }
        if self.repetitions == 0 {
            return Err(ScenarioError::invalid("repetitions", "must be positive"));
        }
        if self.bandwidth_bytes_per_ms == Some(0) {
            return Err(ScenarioError::invalid("bandwidth_bytes_per_ms", "must be positive"));
        }
        if self.gather_timeout_ms == Some(0) {
            return Err(ScenarioError::invalid("gather_timeout_ms", "must be positive"));
        }
        if !unsafe_params {
            if !NODE_COUNTS.contains(&self.n_nodes) {
                return Err(ScenarioError::invalid("n_nodes", format!("{} not in {NODE_COUNTS:?}", self.n_nodes)));
            }
            if !WINDOW_DAYS.contains(&self.window_days) {
                return Err(ScenarioError::invalid(
                    "window_days",
                    format!("{} not in {WINDOW_DAYS:?}", self.window_days),
                ));
            }
        }
        Ok(())
    }

    /// The simulator settings for repetition `rep`.
    pub fn run_spec(&self, rep: u32) -> RunSpec {
        let mut spec = RunSpec::new(self.system, self.scenario, self.window_days, self.seed.wrapping_add(rep as u64));
        spec.bandwidth_bytes_per_ms = self.bandwidth_bytes_per_ms;
        spec.node.gather_timeout_ms = self.gather_timeout_ms;
        spec.router_timeout_ms = self.gather_timeout_ms;
        spec
    }
}

/// Bytes per reporting bucket. Client traffic covers both client link classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficSplit {
    pub client: u64,
    pub internal: u64,
    pub server: u64,
}

impl TrafficSplit {
    pub fn of(ledger: &TrafficLedger) -> Self {
        TrafficSplit {
            client: ledger.class_total(LinkClass::ClientNode) + ledger.class_total(LinkClass::ClientServer),
            internal: ledger.class_total(LinkClass::NodeNode),
            server: ledger.class_total(LinkClass::NodeServer),
        }
    }

    pub fn total(&self) -> u64 {
        self.client + self.internal + self.server
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repetition {
    pub rep: u32,
    pub request_time_ms: Millis,
    pub ingest_time_ms: Millis,
    /// Query phase.
    pub traffic: TrafficSplit,
    /// Ingest or sync phase; zero for systems without one.
    pub ingest_traffic: TrafficSplit,
    pub partial: bool,
    pub digest: String,
}

impl Repetition {
    pub fn from_report(rep: u32, r: &RunReport) -> Self {
        Repetition {
            rep,
            request_time_ms: r.request_time_ms,
            ingest_time_ms: r.ingest_time_ms,
            traffic: TrafficSplit::of(&r.query_ledger),
            ingest_traffic: TrafficSplit::of(&r.ingest_ledger),
            partial: r.partial,
            digest: r.digest.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub manifest: DatasetManifest,
    pub repetitions: Vec<Repetition>,
}

impl ScenarioResult {
    fn mean(&self, f: impl Fn(&Repetition) -> f64) -> f64 {
        self.repetitions.iter().map(f).sum::<f64>() / self.repetitions.len() as f64
    }

    pub fn mean_request_time_ms(&self) -> f64 {
        self.mean(|r| r.request_time_ms as f64)
    }

    /// Request plus ingest time, the view in which baselines pay for moving
    /// data before they can answer.
    pub fn mean_total_time_ms(&self) -> f64 {
        self.mean(|r| (r.request_time_ms + r.ingest_time_ms) as f64)
    }

    /// Sample standard deviation; 0 for a single repetition.
    pub fn request_time_std_ms(&self) -> f64 {
        let n = self.repetitions.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean_request_time_ms();
        let ss: f64 = self.repetitions.iter().map(|r| (r.request_time_ms as f64 - m).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    }

    /// The shared digest, or `None` when repetitions disagree.
    pub fn digest(&self) -> Option<&str> {
        let first = &self.repetitions.first()?.digest;
        self.repetitions.iter().all(|r| &r.digest == first).then_some(first.as_str())
    }
}

/// Runs every repetition of `cfg` over data that is already partitioned.
pub fn run_partitioned(
    cfg: &ScenarioConfig,
    manifest: &DatasetManifest,
    partitions: &[LocalStore],
) -> Result<ScenarioResult, ScenarioError> {
    let repetitions = (0..cfg.repetitions)
        .map(|rep| Ok(Repetition::from_report(rep, &run_repetition(&cfg.run_spec(rep), partitions)?)))
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(ScenarioResult { config: cfg.clone(), manifest: manifest.clone(), repetitions })
}

/// Validates `cfg`, loads its dataset and runs it.
pub fn run_scenario(cfg: &ScenarioConfig, unsafe_params: bool) -> Result<ScenarioResult, ScenarioError> {
    cfg.validate(unsafe_params)?;
    let (manifest, partitions) = cfg.dataset.load(cfg.n_nodes, cfg.seed)?;
    run_partitioned(cfg, &manifest, &partitions)
}

/// Every configuration of the experiment matrix for `seed`, grouped by node
/// count so each dataset partitioning is built once.
pub fn matrix_configs(seed: u64, dataset: &DatasetSource) -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for n in NODE_COUNTS {
        for system in SystemKind::ALL {
            for scenario in ScenarioKind::ALL {
                for days in WINDOW_DAYS {
                    let mut cfg = ScenarioConfig::new(system, scenario, n, days, seed);
                    cfg.dataset = dataset.clone();
                    out.push(cfg);
                }
            }
        }
    }
    out
}

/// Runs the full matrix, calling `progress` after each configuration.
pub fn run_matrix(
    seed: u64,
    dataset: &DatasetSource,
    mut progress: impl FnMut(&ScenarioResult),
) -> Result<Vec<ScenarioResult>, ScenarioError> {
    let mut results = Vec::new();
    let mut loaded: Option<(usize, DatasetManifest, Vec<LocalStore>)> = None;
    for cfg in matrix_configs(seed, dataset) {
        if loaded.as_ref().is_none_or(|(n, _, _)| *n != cfg.n_nodes) {
            let (m, p) = dataset.load(cfg.n_nodes, seed)?;
            loaded = Some((cfg.n_nodes, m, p));
        }
        let (_, manifest, partitions) = loaded.as_ref().unwrap();
        let result = run_partitioned(&cfg, manifest, partitions)?;
        progress(&result);
        results.push(result);
    }
    Ok(results)
}
