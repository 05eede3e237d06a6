use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nrtetl::harness::{
    bench_scalability, bench_tailer, fault_inject, load_sample, read_dump, run, sample, scale_csv, tailer_csv,
    verify, HarnessError, InsertionMode, Kill, PipelineConfig, RunOptions, RunReport, TailerBench,
};
use nrtetl::uploader::{dump_rows, dump_text};
use nrtetl::workload::oracle_records;

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "nrtetl", version, about = "Near-real-time OEE extraction, transformation and loading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload log and its manifest.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline once and write the fact dump.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replay a directory written by `sample`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Throughput and buffer time series as CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Compare the dump with the oracle; exit 1 on any difference.
        #[arg(long)]
        check: bool,
    },
    /// Throughput against worker count.
    BenchScale {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        workers: Vec<u32>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extraction throughput against the number of tailed tables.
    BenchTailer {
        #[arg(long, value_enum, default_value = "growing")]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,12,16")]
        tables: Vec<u32>,
        #[arg(long, default_value_t = 2000)]
        records_per_table: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run with workers killed part way and check the result.
    Fault {
        #[arg(long)]
        config: Option<PathBuf>,
        /// WORKER@FRACTION, e.g. 1@0.5; repeatable.
        #[arg(long = "kill", value_parser = parse_kill, required = true)]
        kills: Vec<Kill>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Compare two fact dumps.
    Verify { left: PathBuf, right: PathBuf },
    /// Compute the expected fact dump of a sampled log.
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Growing,
    Fixed,
}

fn parse_kill(s: &str) -> Result<Kill, String> {
    let (w, f) = s.split_once('@').ok_or("expected WORKER@FRACTION")?;
    Ok(Kill {
        worker: w.parse().map_err(|e| format!("worker: {e}"))?,
        at_fraction: f.parse().map_err(|e| format!("fraction: {e}"))?,
    })
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig, HarnessError> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_out(path: &Option<PathBuf>, text: &str) -> Result<(), HarnessError> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(p: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(p, text).map_err(|e| HarnessError::new("output", format!("{}: {e}", p.display())))
}

fn summary(r: &RunReport) {
    let m = &r.metrics;
    eprintln!(
        "processed {} records in {:.3}s ({:.0} records/s), {} facts, buffer peak {}, dead letters {}",
        m.processed,
        m.processing.as_secs_f64(),
        m.throughput,
        r.dump.len(),
        m.buffer_peak,
        m.dead_letters
    );
    for k in &m.kills {
        eprintln!(
            "killed worker {} at {:.3}{}",
            k.worker,
            k.progress,
            if k.during_bootstrap { " during bootstrap" } else { "" }
        );
    }
    if let (Some(a), Some(b)) = (m.pre_kill_throughput, m.post_kill_throughput) {
        eprintln!("throughput before kill {a:.0}/s, after {b:.0}/s");
    }
    if let Err(e) = &r.integrity {
        eprintln!("integrity: {e}");
    }
    if let Some(d) = &r.diff {
        if d.is_empty() {
            eprintln!("dump matches oracle");
        } else {
            eprint!("{d}");
        }
    }
}

fn exec(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Sample { config, out } => {
            let c = load_config(&config)?;
            let m = sample(&c.workload, &out, c.segment_records)?;
            eprintln!("wrote {} records to {}", m.total, out.display());
            Ok(true)
        }
        Command::Run { config, log, dump, metrics, check } => {
            let c = load_config(&config)?;
            let r = run(
                &c,
                &RunOptions {
                    kills: Vec::new(),
                    log_dir: log,
                    check_oracle: check,
                },
            )?;
            summary(&r);
            if let Some(d) = &dump {
                write_file(d, &dump_text(&r.dump))?;
            }
            if let Some(p) = &metrics {
                write_file(p, &r.series_csv())?;
            }
            Ok(r.passed())
        }
        Command::BenchScale { config, workers, repeats, out } => {
            let c = load_config(&config)?;
            let points = bench_scalability(&c, &workers, repeats)?;
            write_out(&out, &scale_csv(&c, &points))?;
            Ok(points.iter().all(|p| p.failures.is_empty()))
        }
        Command::BenchTailer { mode, tables, records_per_table, out } => {
            let bench = TailerBench {
                records_per_table,
                ..TailerBench::default()
            };
            let mode = match mode {
                ModeArg::Growing => InsertionMode::Growing,
                ModeArg::Fixed => InsertionMode::Fixed,
            };
            let points = bench_tailer(&bench, &tables, mode)?;
            write_out(&out, &tailer_csv(&bench, &points))?;
            Ok(true)
        }
        Command::Fault { config, kills, metrics } => {
            let c = load_config(&config)?;
            let r = fault_inject(&c, &kills)?;
            summary(&r);
            if let Some(p) = &metrics {
                write_file(p, &r.series_csv())?;
            }
            Ok(r.passed())
        }
        Command::Verify { left, right } => {
            let d = verify(&read_dump(&left)?, &read_dump(&right)?).map_err(|e| HarnessError::new("verify", e))?;
            if d.is_empty() {
                eprintln!("dumps match");
            } else {
                print!("{d}");
            }
            Ok(d.is_empty())
        }
        Command::Oracle { config, log, out } => {
            let c = load_config(&config)?;
            let (records, _) = load_sample(&log, &c.workload)?;
            let rows = oracle_records(&records, c.workload.schema_preset, c.window_ms);
            write_out(&out, &dump_text(&dump_rows(&rows)))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match exec(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
