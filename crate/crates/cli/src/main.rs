use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dta_core::hashing::HASH_ALGORITHM;
use dta_core::memstore::{diff_offsets, MemoryRegion};
use dta_sim::suites::bounds_rows;
use dta_sim::suites::BOUNDS_COLUMNS;
use dta_sim::{run, run_suite, ConfigError, Grid, SimConfig, Table};
use serde_json::Value;

/// Direct Telemetry Access simulator, experiment suites and bound evaluator.
#[derive(Parser)]
#[command(name = "dta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Write the table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit a JSON array instead of CSV.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and report delivery and query statistics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long, env = "DTA_SEED")]
        seed: Option<u64>,
        /// Also write the final collector memory to this file.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Run a named parameter sweep.
    Suite {
        name: String,
        #[arg(long, env = "DTA_SEED", default_value_t = 1)]
        seed: u64,
        /// Grid override, `key=v1,v2`; may be repeated.
        #[arg(long = "set", value_name = "KEY=VALUES")]
        set: Vec<String>,
        #[command(flatten)]
        output: Output,
    },
    /// Evaluate the closed-form bounds over a parameter grid.
    Bounds {
        #[arg(long = "N", value_delimiter = ',', default_value = "2")]
        n: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "32")]
        b: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "0.1")]
        alpha: Vec<f64>,
        #[arg(long = "B", value_delimiter = ',', default_value = "5")]
        hops: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "18")]
        v_bits: Vec<f64>,
        #[command(flatten)]
        output: Output,
    },
    /// Run a configuration and write its collector memory, or print a dump file as hex.
    Dump {
        /// Config to run; omit with --hex to print an existing dump.
        #[arg(long, required_unless_present = "hex")]
        config: Option<PathBuf>,
        #[arg(long, env = "DTA_SEED")]
        seed: Option<u64>,
        #[arg(long, required_unless_present = "hex")]
        out: Option<PathBuf>,
        /// Existing dump file to print.
        #[arg(long, conflicts_with_all = ["config", "out"])]
        hex: Option<PathBuf>,
    },
    /// Compare two memory dumps; exits 2 when they differ.
    Diff {
        a: PathBuf,
        b: PathBuf,
        /// Differing offsets to list.
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
    /// Check a config (.json) or a result table (anything else).
    Validate { path: PathBuf },
}

enum Failure {
    Config(anyhow::Error),
    Mismatch,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn emit(table: &Table, output: &Output) -> Result<()> {
    let text = if output.json { table.to_json() } else { table.to_csv() };
    match &output.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<SimConfig> {
    let mut cfg = SimConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Flattens the report into one row; nested objects become `outer_inner`.
fn report_table(value: &Value) -> Table {
    let mut cols = Vec::new();
    let mut cells = Vec::new();
    let Value::Object(map) = value else { unreachable!("reports serialize as objects") };
    for (k, v) in map {
        match v {
            Value::Object(inner) => {
                for (ik, iv) in inner {
                    cols.push(format!("{k}_{ik}"));
                    cells.push(cell(iv));
                }
            }
            _ => {
                cols.push(k.clone());
                cells.push(cell(v));
            }
        }
    }
    let mut t = Table::new(cols);
    t.push(cells);
    t
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            seed,
            dump,
            output,
        } => {
            let cfg = load(&config, seed)?;
            let (report, region) = run(&cfg).map_err(anyhow::Error::from)?;
            if let Some(p) = dump {
                region
                    .write_dump(&p)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            let value = serde_json::to_value(&report).map_err(anyhow::Error::from)?;
            let table = report_table(&value)
                .with_meta("suite", "run")
                .with_meta("hash", HASH_ALGORITHM)
                .with_meta("seed", cfg.seed)
                .with_meta("config_sha256", cfg.digest());
            emit(&table, &output)?;
            if !report.is_conserved() {
                eprintln!("warning: report counters do not balance");
            }
        }
        Command::Suite {
            name,
            seed,
            set,
            output,
        } => {
            let grid = Grid::from_overrides(&set).map_err(anyhow::Error::from)?;
            let table = run_suite(&name, &grid, seed).map_err(anyhow::Error::from)?;
            emit(&table, &output)?;
        }
        Command::Bounds {
            n,
            b,
            alpha,
            hops,
            v_bits,
            output,
        } => {
            let mut t = Table::new(BOUNDS_COLUMNS).with_meta("suite", "bounds");
            for &a in &alpha {
                for &b in &b {
                    for &n in &n {
                        for &h in &hops {
                            for &v in &v_bits {
                                for row in bounds_rows(n, b, a, h, v).map_err(anyhow::Error::from)? {
                                    t.push(row);
                                }
                            }
                        }
                    }
                }
            }
            emit(&t, &output)?;
        }
        Command::Dump { config, seed, out, hex } => {
            if let Some(p) = hex {
                let region = MemoryRegion::read_dump(&p).with_context(|| format!("reading {}", p.display()))?;
                print!("{}", region.hexdump());
                return Ok(());
            }
            let (config, out) = (config.expect("required by clap"), out.expect("required by clap"));
            let cfg = load(&config, seed)?;
            let (_, region) = run(&cfg).map_err(anyhow::Error::from)?;
            region
                .write_dump(&out)
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Diff { a, b, limit } => {
            let read = |p: &Path| std::fs::read(p).with_context(|| format!("reading {}", p.display()));
            let (x, y) = (read(&a)?, read(&b)?);
            if x == y {
                println!("identical ({} octets)", x.len());
                return Ok(());
            }
            if x.len() != y.len() {
                println!("sizes differ: {} vs {} octets", x.len(), y.len());
            }
            let offsets = diff_offsets(&x, &y, limit);
            for off in &offsets {
                println!(
                    "0x{off:08x}: {} | {}",
                    x.get(*off).map_or("--".into(), |v| format!("{v:02x}")),
                    y.get(*off).map_or("--".into(), |v| format!("{v:02x}"))
                );
            }
            return Err(Failure::Mismatch);
        }
        Command::Validate { path } => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let json = path.extension().is_some_and(|e| e == "json");
            if json && text.trim_start().starts_with('[') {
                let rows: Vec<Value> =
                    serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?;
                println!("json table ok ({} rows)", rows.len());
            } else if json {
                let cfg = SimConfig::from_json(&text).map_err(anyhow::Error::from)?;
                cfg.validate().map_err(anyhow::Error::from)?;
                println!("config ok (sha256 {})", cfg.digest());
            } else {
                let t = Table::validate(&text).with_context(|| format!("{}", path.display()))?;
                println!("table ok ({} columns, {} rows)", t.columns.len(), t.rows.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch) => ExitCode::from(2),
        Err(Failure::Config(e)) => {
            if let Some(ConfigError::Invalid { path, message }) = e.downcast_ref::<ConfigError>() {
                eprintln!("error: {path}: {message}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
