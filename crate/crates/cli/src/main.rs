use std::fs;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use maison_core::ingest::{http, StagingStore};
use maison_core::merger::coverage::render_text;
use maison_core::merger::CoverageReport;
use maison_core::model::SegmentLength;
use maison_core::scenario::load_scenario;
use maison_core::sim::{merge_staging, run_scenario, Mode, RunOptions, COVERAGE_FILE, MERGED_DIR};

/// Exit codes: 0 success, 1 invalid input, 2 runtime failure.
#[derive(Parser)]
#[command(name = "maison", version, about = "Simulate, ingest and merge multimodal home-sensing data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Inproc,
    Wire,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegmentArg {
    Hour,
    Day,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario end to end and write all artifacts under --out.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "inproc")]
        mode: ModeArg,
        /// Overrides the scenario seed.
        #[arg(long, env = "MAISON_SEED")]
        seed: Option<u64>,
        /// Ingest port in wire mode (0 = any free port).
        #[arg(long, default_value_t = 0)]
        port: u16,
    },
    /// Merge a staging store into per-modality, per-segment CSVs.
    Merge {
        #[arg(long)]
        staging: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "day")]
        segment: SegmentArg,
        /// Local time offset for segment boundaries; defaults to the one
        /// recorded in the store.
        #[arg(long, allow_hyphen_values = true)]
        utc_offset_min: Option<i32>,
    },
    /// Print the coverage summary of a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the ingest endpoint on loopback until killed.
    Serve {
        #[arg(long)]
        port: u16,
        #[arg(long)]
        staging: PathBuf,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { config, out, mode, seed, port } => {
            let text = fs::read_to_string(&config)
                .map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", config.display())))?;
            let sc = load_scenario(&text, seed).map_err(|e| Failure::Invalid(format!("{}: {e}", config.display())))?;
            let mode = match mode {
                ModeArg::Inproc => Mode::Inproc,
                ModeArg::Wire => Mode::Wire,
            };
            let summary = run_scenario(&sc, &out, RunOptions { mode, port }).map_err(runtime)?;
            println!(
                "{}: seed {}, {} samples emitted, {} staged, {} merged files, {} trace events",
                sc.name, sc.seed, summary.emitted, summary.staged, summary.merged_files, summary.trace_events
            );
            for (device, n) in &summary.stranded {
                println!("stranded: {device} {n}");
            }
            println!("artifacts in {}", out.display());
            Ok(())
        }
        Command::Merge { staging, out, segment, utc_offset_min } => {
            let segment = match segment {
                SegmentArg::Hour => SegmentLength::Hour,
                SegmentArg::Day => SegmentLength::Day,
            };
            if !staging.is_dir() {
                return Err(Failure::Invalid(format!("staging directory {} does not exist", staging.display())));
            }
            let offset = match utc_offset_min {
                Some(o) => o,
                None => StagingStore::read_meta(&staging).map_err(runtime)?.utc_offset_min.unwrap_or(0),
            };
            if offset.abs() >= 24 * 60 {
                return Err(Failure::Invalid(format!("utc offset {offset} is not within one day")));
            }
            let (files, w) = merge_staging(&staging, &out, segment, offset).map_err(runtime)?;
            println!("{files} files ({} rewritten, {} removed) in {}", w.rewritten, w.removed, out.display());
            Ok(())
        }
        Command::Report { out } => {
            let path = out.join(COVERAGE_FILE);
            if !out.join(MERGED_DIR).is_dir() {
                return Err(Failure::Runtime(format!("no merged output under {}", out.display())));
            }
            let text = fs::read_to_string(&path).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
            let report: CoverageReport =
                serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            print!("{}", render_text(&report));
            Ok(())
        }
        Command::Serve { port, staging } => {
            let store = Arc::new(StagingStore::open(&staging).map_err(runtime)?);
            let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
            let handle = http::serve(addr, store).map_err(|e| Failure::Runtime(format!("cannot bind {addr}: {e}")))?;
            println!("ingest listening on {}", handle.base_url());
            handle.join().map_err(runtime)
        }
    }
}
