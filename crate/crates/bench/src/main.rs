use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use syncmesh_bench::dataset::{write_synthetic, DatasetError, SyntheticSpec};
use syncmesh_bench::export::{export_results, Format};
use syncmesh_bench::scenario::{
    run_matrix, run_scenario, DatasetSource, ScenarioConfig, ScenarioError, DEFAULT_BANDWIDTH_BYTES_PER_MS,
    DEFAULT_REPETITIONS,
};
use syncmesh_core::experiment::{ScenarioKind, SystemKind};

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;

#[derive(Parser)]
#[command(name = "bench", about = "Run syncmesh and baseline experiments on a simulated network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and export its repetitions.
    Run {
        #[arg(long, value_parser = parse_system)]
        system: SystemKind,
        #[arg(long, value_parser = parse_scenario)]
        scenario: ScenarioKind,
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        days: u64,
        #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
        reps: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path or `synthetic`.
        #[arg(long, default_value = "synthetic")]
        dataset: DatasetSource,
        /// Access-link bandwidth in bytes per millisecond; 0 is unlimited.
        #[arg(long, default_value_t = DEFAULT_BANDWIDTH_BYTES_PER_MS)]
        bandwidth: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Allow node counts and windows outside the experiment matrix.
        #[arg(long)]
        unsafe_params: bool,
    },
    /// Run every configuration of the experiment matrix into `<out>/results.csv`
    /// and `<out>/results.json`.
    Matrix {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        dataset: DatasetSource,
    },
    /// Write a synthetic sensor CSV.
    Gen {
        #[arg(long)]
        sensors: u64,
        #[arg(long)]
        days: u64,
        /// Readings per sensor per day.
        #[arg(long)]
        rate: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_system(s: &str) -> Result<SystemKind, String> {
    SystemKind::from_name(s).ok_or_else(|| format!("unknown system `{s}`"))
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    ScenarioKind::from_name(s).ok_or_else(|| format!("unknown scenario `{s}`"))
}

enum Failure {
    Validation(String),
    Io(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        ScenarioError::from(e).into()
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { system, scenario, nodes, days, reps, seed, dataset, bandwidth, out, format, unsafe_params } => {
            let mut cfg = ScenarioConfig::new(system, scenario, nodes, days, seed);
            cfg.repetitions = reps;
            cfg.dataset = dataset;
            cfg.bandwidth_bytes_per_ms = (bandwidth > 0).then_some(bandwidth);
            let result = run_scenario(&cfg, unsafe_params)?;
            export_results(&[result], format, &out)?;
        }
        Command::Matrix { seed, out, dataset } => {
            fs::create_dir_all(&out)?;
            let results = run_matrix(seed, &dataset, |r| {
                let c = &r.config;
                eprintln!(
                    "{} {} n={} days={} mean_request_ms={:.1}",
                    c.system,
                    c.scenario,
                    c.n_nodes,
                    c.window_days,
                    r.mean_request_time_ms()
                );
            })?;
            export_results(&results, Format::Csv, &out.join("results.csv"))?;
            export_results(&results, Format::Json, &out.join("results.json"))?;
        }
        Command::Gen { sensors, days, rate, seed, out } => {
            let spec = SyntheticSpec { sensors, days, readings_per_day: rate, seed };
            write_synthetic(spec, BufWriter::new(File::create(&out)?))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_IO)
        }
    }
}
