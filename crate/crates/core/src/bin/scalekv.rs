use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scalekv::bench::{cmd_bench, cmd_calibrate, cmd_generate, cmd_inspect, cmd_report, RunConfig};

#[derive(Parser)]
#[command(
    name = "scalekv",
    version,
    about = "Per-layer, per-scale KV cache budgets on a toy next-scale model"
)]
struct Cli {
    /// Run-config JSON; the toy defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Prompt seed for `generate`, single seed for `bench`, first seed for `calibrate`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select drafter layers from full-cache calibration runs.
    Calibrate,
    /// Sweep policies x budgets x seeds against the full cache.
    Bench,
    /// Generate one token pyramid under the configured policy.
    Generate {
        /// Also dump every attention map to snapshots.bin.
        #[arg(long)]
        snapshots: bool,
    },
    /// Emit attention statistics from a trace written by `generate --snapshots`.
    Inspect {
        /// Trace directory; defaults to `<output_dir>/trace`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Zero-based layer filter for nca_samples.csv.
        #[arg(long)]
        layer: Option<usize>,
        /// Zero-based scale filter for nca_samples.csv.
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Summarize bench CSVs as markdown and check their audits.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

fn load(cli: &Cli) -> scalekv::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> scalekv::Result<ExitCode> {
    match &cli.command {
        Command::Calibrate => {
            let mut cfg = load(&cli)?;
            if let Some(s) = cli.seed {
                let n = cfg.calibration.seeds.len() as u64;
                cfg.calibration.seeds = (s..s + n).collect();
            }
            print!("{}", cmd_calibrate(&cfg)?);
        }
        Command::Bench => {
            let mut cfg = load(&cli)?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            print!("{}", cmd_bench(&cfg)?);
        }
        Command::Generate { snapshots } => {
            let cfg = load(&cli)?;
            let seed = cli.seed.unwrap_or(cfg.seeds[0]);
            print!("{}", cmd_generate(&cfg, seed, *snapshots)?);
        }
        Command::Inspect { trace, layer, scale } => {
            let cfg = load(&cli)?;
            let dir = trace.clone().unwrap_or_else(|| cfg.output_dir.join("trace"));
            println!("{}", cmd_inspect(&cfg, &dir, *layer, *scale)?);
        }
        Command::Report { csv } => {
            let report = cmd_report(csv, cli.out.as_deref())?;
            print!("{}", report.markdown);
            if !report.violations.is_empty() {
                eprintln!("error: {} violation(s) found", report.violations.len());
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invariant() { 2 } else { 1 })
        }
    }
}
