use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{b_uniform_for, PolicyContext, PolicyKind, ScaleKvSection};
use super::metrics::divergence;
use crate::analysis::RolePlan;
use crate::budget::BudgetPlan;
use crate::cache::{CacheAudit, WindowSpec};
use crate::error::{Error, Result};
use crate::geometry::ScaleSchedule;
use crate::model::{generate_with, GenerationTrace, Model};

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str =
    "policy,budget_fraction,seed,logit_mse,token_agreement,mean_kl,peak_bytes,retained_tokens,wall_ms";

/// One `(policy, budget, seed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRow {
    pub policy: String,
    pub budget_fraction: f64,
    pub seed: u64,
    pub logit_mse: f64,
    pub token_agreement: f64,
    pub mean_kl: f64,
    pub peak_bytes: u64,
    /// Summed over layers, entering the final scale.
    pub retained_tokens: usize,
    pub wall_ms: f64,
}

#[derive(Clone)]
pub struct Sweep<'a> {
    pub model: &'a Model,
    pub schedule: &'a ScaleSchedule,
    pub policies: Vec<PolicyKind>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub window: WindowSpec,
    pub roles: Option<RolePlan>,
    pub scalekv: ScaleKvSection,
    pub bytes_per_element: usize,
}

#[derive(Debug, Clone)]
pub struct CellArtifacts {
    pub policy: PolicyKind,
    pub fraction: f64,
    pub seed: u64,
    pub audit: CacheAudit,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<BenchRow>,
    pub audits: Vec<CellArtifacts>,
    /// Budget plans of the planned policies, one per `(policy, fraction)`.
    pub plans: Vec<(PolicyKind, f64, BudgetPlan)>,
    pub summary: BenchSummary,
}

impl Sweep<'_> {
    fn context(&self) -> PolicyContext<'_> {
        PolicyContext {
            model: self.model.config(),
            schedule: self.schedule,
            prefix: self.model.config().cond_tokens,
            window: self.window,
            roles: self.roles.clone(),
            scalekv: &self.scalekv,
        }
    }

    /// Runs every cell, in parallel. Any budget or byte-accounting violation
    /// aborts the sweep with an invariant error.
    pub fn run(&self) -> Result<SweepOutput> {
        if self.seeds.is_empty() || self.policies.is_empty() || self.fractions.is_empty() {
            return Err(Error::Config("sweep needs seeds, policies and budget fractions".into()));
        }
        let ctx = self.context();
        let cfg = self.model.config();
        let prefix = cfg.cond_tokens;

        let mut cells = Vec::new();
        let mut plans = Vec::new();
        for &f in &self.fractions {
            let b = b_uniform_for(f, self.schedule, prefix)?;
            for &kind in &self.policies {
                let (policy, plan) = ctx.build(kind, b)?;
                policy.validate(cfg, self.schedule)?;
                if let Some(plan) = plan {
                    plans.push((kind, f, plan));
                }
                for &seed in &self.seeds {
                    cells.push((kind, f, seed, policy.clone()));
                }
            }
        }

        let references: BTreeMap<u64, GenerationTrace> = self
            .seeds
            .par_iter()
            .map(|&seed| {
                let t = generate_with(
                    self.model,
                    &crate::cache::CachePolicy::Full,
                    self.schedule,
                    seed,
                    self.bytes_per_element,
                )?;
                Ok((seed, t))
            })
            .collect::<Result<_>>()?;

        let results: Vec<(BenchRow, CellArtifacts)> = cells
            .par_iter()
            .map(|(kind, f, seed, policy)| {
                let start = Instant::now();
                let trace = generate_with(self.model, policy, self.schedule, *seed, self.bytes_per_element)?;
                let wall_ms = start.elapsed().as_secs_f64() * 1e3;
                let problems = trace.audit.violations();
                if !problems.is_empty() {
                    return Err(Error::Invariant(format!(
                        "{kind} at {f} seed {seed}: {}",
                        problems.join("; ")
                    )));
                }
                let d = divergence(&references[seed], &trace)?;
                let row = BenchRow {
                    policy: kind.name().to_string(),
                    budget_fraction: *f,
                    seed: *seed,
                    logit_mse: d.logit_mse,
                    token_agreement: d.token_agreement,
                    mean_kl: d.mean_kl,
                    peak_bytes: trace.audit.peak_bytes(),
                    retained_tokens: trace.audit.end_retained_tokens(),
                    wall_ms,
                };
                Ok((
                    row,
                    CellArtifacts {
                        policy: *kind,
                        fraction: *f,
                        seed: *seed,
                        audit: trace.audit,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        let (rows, audits): (Vec<_>, Vec<_>) = results.into_iter().unzip();

        let full_tokens = cfg.layers * self.schedule.history_len(self.schedule.num_scales() - 1, prefix);
        let window = ctx.min_budget()?;
        let tol = ratio_tolerance(cfg.layers, self.schedule.num_scales(), window, full_tokens);
        let summary = summarize(&rows, Some(full_tokens), Some(tol));
        for s in &summary.groups {
            if s.policy == "full" {
                continue;
            }
            if let Some(r) = s.token_ratio {
                if (r - s.budget_fraction).abs() > tol {
                    return Err(Error::Invariant(format!(
                        "{} at {} keeps {:.4} of the full cache, outside tolerance {tol:.4}",
                        s.policy, s.budget_fraction, r
                    )));
                }
            }
        }
        Ok(SweepOutput {
            rows,
            audits,
            plans,
            summary,
        })
    }
}

/// Tolerance on the end-of-run retained ratio: one rounding token plus one
/// observation window per `(layer, scale)`, relative to the full cache.
pub fn ratio_tolerance(layers: usize, scales: usize, window: usize, full_tokens: usize) -> f64 {
    (layers * scales + window * layers * scales) as f64 / full_tokens.max(1) as f64
}

/// Means of one `(policy, budget_fraction)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub policy: String,
    pub budget_fraction: f64,
    pub runs: usize,
    pub logit_mse: f64,
    pub token_agreement: f64,
    pub mean_kl: f64,
    pub peak_bytes: f64,
    pub retained_tokens: f64,
    /// Mean retained tokens over the full cache's, when that is known.
    pub token_ratio: Option<f64>,
}

/// Outcome of the expected ordering check at the 10% budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub budget_fraction: f64,
    pub scalekv_mse: f64,
    pub snapkv_mse: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub schema_version: u32,
    pub csv_header: String,
    pub full_retained_tokens: Option<usize>,
    pub ratio_tolerance: Option<f64>,
    pub groups: Vec<GroupSummary>,
    /// Per policy: mean MSE never rises as the budget grows.
    pub monotone: BTreeMap<String, bool>,
    pub trend: Option<TrendCheck>,
}

pub const TREND_FRACTION: f64 = 0.10;

/// Deterministic fold over rows sorted by policy, fraction and seed.
pub fn summarize(rows: &[BenchRow], full_tokens: Option<usize>, tol: Option<f64>) -> BenchSummary {
    let mut sorted: Vec<&BenchRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.policy, a.seed)
            .cmp(&(&b.policy, b.seed))
            .then(a.budget_fraction.total_cmp(&b.budget_fraction))
    });
    let mut groups: BTreeMap<(String, u64), Vec<&BenchRow>> = BTreeMap::new();
    for r in sorted {
        groups
            .entry((r.policy.clone(), r.budget_fraction.to_bits()))
            .or_default()
            .push(r);
    }
    let mean = |rs: &[&BenchRow], f: &dyn Fn(&BenchRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
    let mut out: Vec<GroupSummary> = groups
        .values()
        .map(|rs| {
            let retained = mean(rs, &|r| r.retained_tokens as f64);
            GroupSummary {
                policy: rs[0].policy.clone(),
                budget_fraction: rs[0].budget_fraction,
                runs: rs.len(),
                logit_mse: mean(rs, &|r| r.logit_mse),
                token_agreement: mean(rs, &|r| r.token_agreement),
                mean_kl: mean(rs, &|r| r.mean_kl),
                peak_bytes: mean(rs, &|r| r.peak_bytes as f64),
                retained_tokens: retained,
                token_ratio: full_tokens.map(|t| retained / t as f64),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.budget_fraction
            .total_cmp(&b.budget_fraction)
            .then(a.policy.cmp(&b.policy))
    });

    let mut monotone = BTreeMap::new();
    let mut by_policy: BTreeMap<&str, Vec<&GroupSummary>> = BTreeMap::new();
    for g in &out {
        by_policy.entry(&g.policy).or_default().push(g);
    }
    for (p, gs) in &by_policy {
        monotone.insert(p.to_string(), gs.windows(2).all(|w| w[1].logit_mse <= w[0].logit_mse));
    }

    let at = |p: &str| {
        out.iter()
            .find(|g| g.policy == p && (g.budget_fraction - TREND_FRACTION).abs() < 1e-12)
    };
    let trend = match (at("scalekv"), at("snapkv")) {
        (Some(s), Some(n)) => Some(TrendCheck {
            budget_fraction: TREND_FRACTION,
            scalekv_mse: s.logit_mse,
            snapkv_mse: n.logit_mse,
            holds: s.logit_mse <= n.logit_mse,
        }),
        _ => None,
    };

    BenchSummary {
        schema_version: CSV_SCHEMA_VERSION,
        csv_header: CSV_HEADER.to_string(),
        full_retained_tokens: full_tokens,
        ratio_tolerance: tol,
        groups: out,
        monotone,
        trend,
    }
}

pub fn write_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a bench CSV, insisting on the exact header.
pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != CSV_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{CSV_HEADER}`, found `{header}`"),
        });
    }
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: csv_kind_message(kind),
        },
    }
}

fn csv_kind_message(kind: csv::ErrorKind) -> String {
    match kind {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("expected {expected_len} fields, found {len}")
        }
        csv::ErrorKind::Utf8 { err, .. } => err.to_string(),
        other => format!("{other:?}"),
    }
}
