//! Command-line harness: argument parsing, config overrides, batch runs and
//! exit codes.

pub mod commands;
pub mod config;

use std::io::Write;
use std::ops::RangeInclusive;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use commands::RunOptions;
use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIAGNOSTIC: i32 = 3;
pub const EXIT_INPUT: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "sak",
    version,
    about = "Stochastic Kaczmarz estimation of link moments from path probes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a probe trace and its ground-truth sidecar.
    Simulate(CommonArgs),
    /// Estimate link means from a trace (or a simulated one).
    Estimate(CommonArgs),
    /// Estimate order-q link moments through the lifted system.
    Moments(CommonArgs),
    /// Re-run a trace and evaluate diagnostics against the closed-form limit.
    Replay(CommonArgs),
}

#[derive(Clone, Debug, Args)]
pub struct CommonArgs {
    /// Config file, or the name of a bundled preset.
    #[arg(long, default_value = config::REFERENCE_PRESET)]
    pub config: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run every seed in an inclusive range `a..b`, one subdirectory each.
    #[arg(long, value_parser = parse_seed_range, conflicts_with = "seed")]
    pub seeds: Option<RangeInclusive<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Record every `stride`-th iterate after the dense prefix.
    #[arg(long)]
    pub stride: Option<u64>,
    /// Also track the running average of the iterates.
    #[arg(long)]
    pub average: bool,
    /// Refuse to lift a trace whose noise level is nonzero or unknown.
    #[arg(long)]
    pub strict_noise: bool,
    /// Read observations from this trace instead of simulating.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Ground-truth sidecar; defaults to `truth.csv` next to the trace.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Required bound on the initial-point bias distance in `replay`.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Moment order for `moments`.
    #[arg(long)]
    pub q: Option<u32>,
}

fn parse_seed_range(s: &str) -> std::result::Result<RangeInclusive<u64>, String> {
    let (a, b) = s.split_once("..").ok_or("expected a..b")?;
    let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: u64 = b
        .trim()
        .trim_start_matches('=')
        .parse()
        .map_err(|e| format!("{e}"))?;
    if a > b {
        return Err(format!("empty seed range {a}..{b}"));
    }
    Ok(a..=b)
}

impl CommonArgs {
    /// Loads the config and applies command-line overrides.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(n) = self.steps {
            cfg.steps = n;
        }
        if let Some(s) = self.stride {
            if s == 0 {
                return Err(Error::config("stride", "must be positive"));
            }
            cfg.stride = s;
        }
        if let Some(q) = self.q {
            cfg.q = q;
        }
        cfg.average |= self.average;
        cfg.strict_noise |= self.strict_noise;
        Ok(cfg)
    }

    pub fn options(&self) -> RunOptions {
        RunOptions {
            trace: self.trace.clone(),
            truth: self.truth.clone(),
            max_steps: self.steps,
            delta: self.delta,
        }
    }
}

/// Maps a library error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::RowIndexOutOfRange { .. }
        | Error::NonFiniteObservation(_) => EXIT_INPUT,
        _ => EXIT_CONFIG,
    }
}

/// Per-run outcome used by both single and batch invocations.
#[derive(Clone, Debug)]
struct Summary {
    seed: u64,
    rel_error: Option<f64>,
    diagnostics_pass: bool,
}

fn run_once(command: &Command, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Summary> {
    let (rel_error, diagnostics_pass) = match command {
        Command::Simulate(_) => {
            commands::cmd_simulate(cfg)?;
            (None, true)
        }
        Command::Estimate(_) => (commands::cmd_estimate(cfg, opts)?.relative_error(), true),
        Command::Moments(_) => (
            commands::cmd_moments(cfg, opts)?.estimate.relative_error(),
            true,
        ),
        Command::Replay(_) => {
            let report = commands::cmd_replay(cfg, opts)?;
            let rel = report
                .get("final_rel_error")
                .and_then(|m| m.value.parse().ok());
            (rel, report.all_pass())
        }
    };
    Ok(Summary {
        seed: cfg.seed,
        rel_error,
        diagnostics_pass,
    })
}

fn write_batch_summary(cfg: &ExperimentConfig, rows: &[Summary]) -> Result<()> {
    let path = cfg.out.join("batch_summary.csv");
    let ctx = || format!("writing {}", path.display());
    let mut body = String::from("seed,rel_error,diagnostics_pass\n");
    for r in rows {
        let rel = r
            .rel_error
            .map_or_else(|| "na".to_string(), crate::format::sig9);
        body.push_str(&format!("{},{rel},{}\n", r.seed, r.diagnostics_pass));
    }
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(ctx(), e))?;
    std::fs::File::create(&path)
        .and_then(|mut f| f.write_all(body.as_bytes()))
        .map_err(|e| Error::io(ctx(), e))
}

/// Executes a parsed command line and returns the exit code.
pub fn execute(cli: &Cli) -> Result<i32> {
    let args = match &cli.command {
        Command::Simulate(a) | Command::Estimate(a) | Command::Moments(a) | Command::Replay(a) => a,
    };
    let cfg = args.resolve()?;
    let opts = args.options();
    let summaries = match &args.seeds {
        None => vec![run_once(&cli.command, &cfg, &opts)?],
        Some(range) => {
            let seeds: Vec<u64> = range.clone().collect();
            let rows = seeds
                .par_iter()
                .map(|&s| {
                    let mut c = cfg.clone();
                    c.seed = s;
                    c.out = cfg.out.join(format!("seed-{s}"));
                    run_once(&cli.command, &c, &opts)
                })
                .collect::<Result<Vec<_>>>()?;
            write_batch_summary(&cfg, &rows)?;
            rows
        }
    };
    for s in &summaries {
        if let Some(r) = s.rel_error {
            let r = crate::format::sig9(r);
            match args.seeds {
                Some(_) => eprintln!("seed {}: relative error {r}", s.seed),
                None => eprintln!("relative error {r}"),
            }
        }
    }
    Ok(if summaries.iter().all(|s| s.diagnostics_pass) {
        EXIT_OK
    } else {
        EXIT_DIAGNOSTIC
    })
}

/// Parses `args` and runs; errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
