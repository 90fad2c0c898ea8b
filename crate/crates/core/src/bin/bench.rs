//! Benchmark CLI over the simulated cluster.
//!
//! ```text
//! bench init-table --nodes 2 --size 1GiB --type uint64 --calibrated
//! bench transfer --method ethernet --size 16MiB
//! bench strided --stride 16 --mode remote
//! ```
//!
//! Reports print as JSON; `--out file.json` or `--out file.csv` also writes
//! them to disk.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use csm_core::bench::{
    bench_init_table, bench_strided, bench_transfer, BenchConfig, StridedMode, TransferMethod,
};
use csm_core::columnar::DataType;
use csm_core::{CostModel, Error, Result};

#[derive(Parser)]
#[command(name = "bench", about = "simulated-time benchmarks for cluster-shared-memory tables")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Seed for deterministic payload generation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the report here as well (.json or .csv by extension).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Load cost-model overrides from a JSON file.
    #[arg(long, global = true, value_name = "FILE", conflicts_with = "calibrated")]
    cost_model: Option<PathBuf>,
    /// Use the constants fitted to the measured 1 GiB initialization run.
    #[arg(long, global = true)]
    calibrated: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ElementType {
    Uint64,
    Int64,
    Float64,
}

impl From<ElementType> for DataType {
    fn from(e: ElementType) -> DataType {
        match e {
            ElementType::Uint64 => DataType::UInt64,
            ElementType::Int64 => DataType::Int64,
            ElementType::Float64 => DataType::Float64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Local,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ethernet,
    Csm,
}

#[derive(Subcommand)]
enum Cmd {
    /// Component breakdown of initializing a table in remote memory.
    InitTable {
        #[arg(long, default_value_t = 2)]
        nodes: usize,
        #[arg(long, default_value = "16MiB", value_parser = parse_size)]
        size: u64,
        #[arg(long = "type", value_enum, default_value_t = ElementType::Uint64)]
        element: ElementType,
    },
    /// Descriptor sharing vs full copy over ethernet.
    Transfer {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, default_value = "16MiB", value_parser = parse_size)]
        size: u64,
        #[arg(long, default_value_t = 2)]
        nodes: usize,
    },
    /// Strided read throughput against local or remote memory.
    Strided {
        #[arg(long, default_value_t = 1)]
        stride: u64,
        #[arg(long, value_enum, default_value_t = Mode::Local)]
        mode: Mode,
        #[arg(long, default_value = "16MiB", value_parser = parse_size)]
        size: u64,
        #[arg(long, default_value_t = 2)]
        nodes: usize,
    },
}

fn parse_size(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim();
    let (digits, mult) = if let Some(p) = s.strip_suffix("GiB") {
        (p, 1u64 << 30)
    } else if let Some(p) = s.strip_suffix("MiB") {
        (p, 1 << 20)
    } else if let Some(p) = s.strip_suffix("KiB") {
        (p, 1 << 10)
    } else if let Some(p) = s.strip_suffix('B') {
        (p, 1)
    } else {
        (s, 1)
    };
    digits
        .trim()
        .parse::<u64>()
        .map(|v| v * mult)
        .map_err(|e| format!("bad size {s:?}: {e}"))
}

fn json_to_csv(value: &serde_json::Value) -> String {
    let obj = value.as_object().expect("reports are flat objects");
    let header: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
    let row: Vec<String> = obj.values().map(|v| v.to_string()).collect();
    format!("{}\n{}\n", header.join(","), row.join(","))
}

fn emit(out: &Option<PathBuf>, report: impl serde::Serialize) -> Result<()> {
    let value = serde_json::to_value(&report)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    if let Some(path) = out {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => json_to_csv(&value),
            _ => format!("{}\n", serde_json::to_string_pretty(&value)?),
        };
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cost_model = match (&cli.cost_model, cli.calibrated) {
        (Some(path), _) => {
            let m: CostModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            m.validate()?;
            m
        }
        (None, true) => CostModel::calibrated(),
        (None, false) => CostModel::default(),
    };
    let base = BenchConfig {
        seed: cli.seed,
        cost_model,
        ..Default::default()
    };
    match cli.cmd {
        Cmd::InitTable { nodes, size, element } => {
            let report = bench_init_table(&BenchConfig {
                nodes,
                table_bytes: size,
                element_type: element.into(),
                ..base
            })?;
            emit(&cli.out, report)
        }
        Cmd::Transfer { method, size, nodes } => {
            let report = bench_transfer(&BenchConfig {
                nodes,
                table_bytes: size,
                method: match method {
                    Method::Ethernet => TransferMethod::Ethernet,
                    Method::Csm => TransferMethod::Csm,
                },
                ..base
            })?;
            emit(&cli.out, report)
        }
        Cmd::Strided { stride, mode, size, nodes } => {
            let report = bench_strided(&BenchConfig {
                nodes,
                table_bytes: size,
                stride,
                mode: match mode {
                    Mode::Local => StridedMode::Local,
                    Mode::Remote => StridedMode::Remote,
                },
                ..base
            })?;
            emit(&cli.out, report)
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        let code = match e {
            Error::BenchConfig(_) => 2,
            _ => 1,
        };
        eprintln!("error: {e}");
        std::process::exit(code);
    }
}
