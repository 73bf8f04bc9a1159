//! Calibration runs, policy sweeps against the full-cache reference, and
//! the reports built from them.
//!
//! Every subcommand of the `scalekv` binary is a `cmd_*` function here
//! returning a value whose `Display` is what the binary prints.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! role_plan.json                 calibrate: ASI, Z-scores, drafters
//! bench.csv, bench_summary.json  bench
//! plans/<policy>_f<frac>.json    bench: budget plans
//! audits/<policy>_f<frac>_s<seed>.json
//! trace/                         generate
//! inspect/                       inspect: nca_samples.csv, nca_groups.csv, asi_table.csv
//! ```
//!
//! Indices in every file are zero-based; console output names scales `r_1..r_K`.

mod config;
mod inspect;
pub mod metrics;
mod report;
mod sweep;

use std::fmt;
use std::path::{Path, PathBuf};

pub use config::{
    b_uniform_for, BenchSection, CalibrationSection, PolicyContext, PolicyKind, RunConfig, ScaleKvSection,
    DEFAULT_FRACTIONS, STREAMING_SINKS,
};
pub use inspect::{asi_from_snapshots, nca_samples, scale_groups, NcaSamples};
pub use report::{audit_file_name, build_report, plan_file_name, Report};
pub use sweep::{
    ratio_tolerance, read_csv, summarize, write_csv, BenchRow, BenchSummary, CellArtifacts, GroupSummary, Sweep,
    SweepOutput, TrendCheck, CSV_HEADER, CSV_SCHEMA_VERSION, TREND_FRACTION,
};

use crate::analysis::{calibrate, load_calibration, save_calibration, RolePlan};
use crate::error::{Error, Result};
use crate::model::{generate_observed, generate_with, read_snapshots, GenerationTrace, Model, SnapshotCollector};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct CalibrateOutcome {
    pub path: PathBuf,
    pub roles: RolePlan,
}

impl fmt::Display for CalibrateOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "wrote {} ({} drafters)",
            self.path.display(),
            self.roles.n_drafters()
        )?;
        writeln!(f, "scale  drafters  refiners")?;
        for (k, d) in self.roles.drafters_per_scale().iter().enumerate() {
            writeln!(f, "r_{:<4} {:>8}  {:>8}", k + 1, d, self.roles.layers() - d)?;
        }
        Ok(())
    }
}

/// Calibrates drafters on `calibration.seeds` and writes `role_plan.json`.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<CalibrateOutcome> {
    let schedule = cfg.schedule()?;
    let model = Model::new(cfg.model.clone())?;
    let (roles, table) = calibrate(
        &model,
        &cfg.calibration.seeds,
        cfg.calibration.k_prime,
        cfg.n_drafters(&schedule),
        &schedule,
    )?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("role_plan.json");
    save_calibration(&path, &roles, &table)?;
    Ok(CalibrateOutcome { path, roles })
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub csv: PathBuf,
    pub summary_path: PathBuf,
    pub output: SweepOutput,
}

impl fmt::Display for BenchOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.output.summary;
        writeln!(
            f,
            "wrote {} ({} rows) and {}",
            self.csv.display(),
            self.output.rows.len(),
            self.summary_path.display()
        )?;
        writeln!(
            f,
            "{:<15} {:>6} {:>14} {:>9} {:>14} {:>8}",
            "policy", "budget", "logit_mse", "agree", "mean_kl", "ratio"
        )?;
        for g in &s.groups {
            writeln!(
                f,
                "{:<15} {:>6} {:>14.6e} {:>9.4} {:>14.6e} {:>8}",
                g.policy,
                g.budget_fraction,
                g.logit_mse,
                g.token_agreement,
                g.mean_kl,
                g.token_ratio.map_or("-".into(), |r| format!("{r:.4}"))
            )?;
        }
        if let Some(t) = &s.trend {
            if t.holds {
                writeln!(
                    f,
                    "trend: scalekv <= snapkv at {} ({:.6e} vs {:.6e})",
                    t.budget_fraction, t.scalekv_mse, t.snapkv_mse
                )?;
            } else {
                writeln!(
                    f,
                    "WARNING: expected trend FAILED: scalekv {:.6e} > snapkv {:.6e} at budget {}",
                    t.scalekv_mse, t.snapkv_mse, t.budget_fraction
                )?;
            }
        }
        Ok(())
    }
}

/// Runs the policy sweep over `seeds` and writes CSV, summary, plans and audits.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchOutcome> {
    let schedule = cfg.schedule()?;
    let model = Model::new(cfg.model.clone())?;
    let roles = if cfg.bench.policies.contains(&PolicyKind::Scalekv) {
        let path = cfg.role_plan_path();
        if !path.is_file() {
            return Err(Error::Config(format!(
                "role plan {} not found; run `calibrate` first",
                path.display()
            )));
        }
        Some(load_calibration(&path)?.0)
    } else {
        None
    };
    let sweep = Sweep {
        model: &model,
        schedule: &schedule,
        policies: cfg.bench.policies.clone(),
        fractions: cfg.bench.budget_fractions.clone(),
        seeds: cfg.seeds.clone(),
        window: cfg.bench.window,
        roles,
        scalekv: cfg.scalekv.clone(),
        bytes_per_element: cfg.bytes_per_element,
    };
    let output = sweep.run()?;

    let out = &cfg.output_dir;
    let (plans, audits) = (out.join("plans"), out.join("audits"));
    create_dir(&plans)?;
    create_dir(&audits)?;
    let csv = out.join("bench.csv");
    write_csv(&csv, &output.rows)?;
    let summary_path = out.join("bench_summary.json");
    write_json(&summary_path, &output.summary)?;
    for (kind, frac, plan) in &output.plans {
        plan.save(&plans.join(plan_file_name(kind.name(), *frac)))?;
    }
    for a in &output.audits {
        a.audit
            .save(&audits.join(audit_file_name(a.policy.name(), a.fraction, a.seed)))?;
    }
    Ok(BenchOutcome {
        csv,
        summary_path,
        output,
    })
}

#[derive(Debug, Clone)]
pub struct GenerateOutcome {
    pub dir: PathBuf,
    pub trace: GenerationTrace,
}

impl fmt::Display for GenerateOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.trace;
        writeln!(
            f,
            "policy {} seed {} -> {}",
            t.policy,
            t.prompt_seed,
            self.dir.display()
        )?;
        writeln!(f, "scale   map  retained  bytes")?;
        for (s, m) in t.cache_stats.iter().zip(&t.token_maps) {
            writeln!(
                f,
                "r_{:<4} {:>2}x{:<2} {:>8} {:>6}",
                s.scale + 1,
                m.rows,
                m.cols,
                s.retained_tokens,
                s.bytes
            )?;
        }
        writeln!(f, "peak bytes {}", t.peak_bytes())?;
        if !t.snapshots.is_empty() {
            writeln!(f, "{} attention snapshots", t.snapshots.len())?;
        }
        Ok(())
    }
}

/// Generates under the configured policy and writes the trace to `output_dir/trace`.
pub fn cmd_generate(cfg: &RunConfig, seed: u64, snapshots: bool) -> Result<GenerateOutcome> {
    let schedule = cfg.schedule()?;
    let model = Model::new(cfg.model.clone())?;
    let policy = cfg.cache_policy(&schedule)?;
    let trace = if snapshots {
        if cfg.bytes_per_element != 4 {
            return Err(Error::Config("snapshot capture accounts 4-byte elements only".into()));
        }
        let mut collector = SnapshotCollector::default();
        let mut t = generate_observed(&model, &policy, &schedule, seed, &mut collector)?;
        t.snapshots = collector.snapshots;
        t
    } else {
        generate_with(&model, &policy, &schedule, seed, cfg.bytes_per_element)?
    };
    let dir = cfg.output_dir.join("trace");
    trace.write_dir(&dir)?;
    Ok(GenerateOutcome { dir, trace })
}

#[derive(Debug, Clone)]
pub struct InspectOutcome {
    pub dir: PathBuf,
    pub samples: usize,
    pub small: usize,
    pub large: usize,
}

impl fmt::Display for InspectOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "wrote nca_samples.csv ({} samples), nca_groups.csv and asi_table.csv to {}",
            self.samples,
            self.dir.display()
        )?;
        write!(
            f,
            "small-scale group {} samples, large-scale group {} samples",
            self.small, self.large
        )
    }
}

/// Reads `trace/snapshots.bin` and writes attention statistics for plotting.
/// `layer` and `scale` (zero-based) filter `nca_samples.csv`.
pub fn cmd_inspect(
    cfg: &RunConfig,
    trace_dir: &Path,
    layer: Option<usize>,
    scale: Option<usize>,
) -> Result<InspectOutcome> {
    let schedule = cfg.schedule()?;
    let snapshots = read_snapshots(&trace_dir.join("snapshots.bin"))?;
    let samples = nca_samples(&snapshots)?;
    let table = asi_from_snapshots(
        &snapshots,
        cfg.model.layers,
        schedule.num_scales(),
        cfg.model.heads,
        cfg.calibration.k_prime,
    )?;
    let dir = cfg.output_dir.join("inspect");
    create_dir(&dir)?;
    let n = inspect::write_samples(&dir.join("nca_samples.csv"), &samples, layer, scale)?;
    let (small, large) = inspect::write_groups(&dir.join("nca_groups.csv"), &samples, schedule.num_scales())?;
    inspect::write_asi(&dir.join("asi_table.csv"), &table)?;
    Ok(InspectOutcome {
        dir,
        samples: n,
        small,
        large,
    })
}

/// Builds the markdown report; writes `report.md` into `out` when given.
pub fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<Report> {
    let report = build_report(inputs)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("report.md");
        std::fs::write(&path, &report.markdown).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}
