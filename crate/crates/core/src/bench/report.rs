use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::sweep::{read_csv, summarize, BenchRow, BenchSummary};
use crate::budget::BudgetPlan;
use crate::cache::CacheAudit;
use crate::error::{Error, Result};

/// File name of the audit for one bench cell.
pub fn audit_file_name(policy: &str, fraction: f64, seed: u64) -> String {
    format!("{policy}_f{fraction}_s{seed}.json")
}

pub fn plan_file_name(policy: &str, fraction: f64) -> String {
    format!("{policy}_f{fraction}.json")
}

#[derive(Debug, Clone)]
pub struct Report {
    pub markdown: String,
    pub summary: BenchSummary,
    pub violations: Vec<String>,
    pub audits_checked: usize,
    pub plans_checked: usize,
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Merges bench CSVs, recomputes per-policy means and checks any `audits/`
/// and `plans/` directories next to each CSV.
pub fn build_report(inputs: &[PathBuf]) -> Result<Report> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one bench CSV".into()));
    }
    let mut rows: Vec<BenchRow> = Vec::new();
    let mut violations = Vec::new();
    let (mut audits_checked, mut plans_checked) = (0, 0);
    for input in inputs {
        let these = read_csv(input)?;
        let dir = input.parent().unwrap_or(Path::new("."));
        let audit_dir = dir.join("audits");
        if audit_dir.is_dir() {
            let mut by_name = BTreeMap::new();
            for p in json_files(&audit_dir)? {
                let audit = CacheAudit::load(&p)?;
                audits_checked += 1;
                for v in audit.violations() {
                    violations.push(format!("{}: {v}", p.display()));
                }
                by_name.insert(p.file_name().unwrap_or_default().to_string_lossy().into_owned(), audit);
            }
            for r in &these {
                let name = audit_file_name(&r.policy, r.budget_fraction, r.seed);
                match by_name.get(&name) {
                    None => violations.push(format!("{}: no audit `{name}` for this row", input.display())),
                    Some(a) => {
                        if a.peak_bytes() != r.peak_bytes || a.end_retained_tokens() != r.retained_tokens {
                            violations.push(format!(
                                "{}: row {} {} seed {} reports {} bytes / {} tokens, audit has {} / {}",
                                input.display(),
                                r.policy,
                                r.budget_fraction,
                                r.seed,
                                r.peak_bytes,
                                r.retained_tokens,
                                a.peak_bytes(),
                                a.end_retained_tokens()
                            ));
                        }
                    }
                }
            }
        }
        let plan_dir = dir.join("plans");
        if plan_dir.is_dir() {
            for p in json_files(&plan_dir)? {
                plans_checked += 1;
                match BudgetPlan::load(&p) {
                    Ok(plan) => {
                        if let Err(e) = plan.check() {
                            violations.push(format!("{}: {e}", p.display()));
                        }
                    }
                    Err(e) => violations.push(format!("{}: {e}", p.display())),
                }
            }
        }
        rows.extend(these);
    }

    let full: Vec<&BenchRow> = rows.iter().filter(|r| r.policy == "full").collect();
    let full_tokens = (!full.is_empty()).then(|| full.iter().map(|r| r.retained_tokens).sum::<usize>() / full.len());
    let summary = summarize(&rows, full_tokens, None);
    let markdown = render(
        &summary,
        rows.len(),
        inputs.len(),
        &violations,
        audits_checked,
        plans_checked,
    );
    Ok(Report {
        markdown,
        summary,
        violations,
        audits_checked,
        plans_checked,
    })
}

fn render(
    summary: &BenchSummary,
    rows: usize,
    files: usize,
    violations: &[String],
    audits: usize,
    plans: usize,
) -> String {
    let mut md = String::from("# Bench report\n\n");
    if !violations.is_empty() {
        let _ = writeln!(
            md,
            "> **{} VIOLATION(S) FOUND.** See the audit section below.\n",
            violations.len()
        );
    }
    if let Some(t) = &summary.trend {
        if t.holds {
            let _ = writeln!(
                md,
                "Expected trend holds: scalekv mean logit MSE {:.6e} <= snapkv {:.6e} at {}% budget.\n",
                t.scalekv_mse,
                t.snapkv_mse,
                t.budget_fraction * 100.0
            );
        } else {
            let _ = writeln!(
                md,
                "> **WARNING: EXPECTED TREND FAILED.** At {}% budget scalekv's mean logit MSE ({:.6e}) is \
                 higher than snapkv's ({:.6e}). The toy model is untrained, so its attention need not show the \
                 drafter/refiner structure the allocator exploits.\n",
                t.budget_fraction * 100.0,
                t.scalekv_mse,
                t.snapkv_mse
            );
        }
    }
    let _ = writeln!(md, "{rows} rows from {files} file(s).\n");

    let mut fractions: Vec<f64> = summary.groups.iter().map(|g| g.budget_fraction).collect();
    fractions.dedup_by(|a, b| a == b);
    for f in fractions {
        let mut gs: Vec<_> = summary.groups.iter().filter(|g| g.budget_fraction == f).collect();
        gs.sort_by(|a, b| a.logit_mse.total_cmp(&b.logit_mse).then(a.policy.cmp(&b.policy)));
        let _ = writeln!(md, "## Budget {}%\n", f * 100.0);
        md.push_str("| rank | policy | runs | logit MSE | token agreement | mean KL | peak bytes | retained tokens | retained ratio |\n");
        md.push_str("|---:|---|---:|---:|---:|---:|---:|---:|---:|\n");
        for (i, g) in gs.iter().enumerate() {
            let ratio = g.token_ratio.map_or("-".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.6e} | {:.4} | {:.6e} | {:.0} | {:.1} | {ratio} |",
                i + 1,
                g.policy,
                g.runs,
                g.logit_mse,
                g.token_agreement,
                g.mean_kl,
                g.peak_bytes,
                g.retained_tokens
            );
        }
        md.push('\n');
    }

    md.push_str("## Monotonicity\n\n| policy | MSE non-increasing with budget |\n|---|---|\n");
    for (p, ok) in &summary.monotone {
        let _ = writeln!(md, "| {p} | {} |", if *ok { "yes" } else { "**no**" });
    }
    md.push('\n');

    let _ = writeln!(
        md,
        "## Audits\n\n{audits} cache audit(s) and {plans} budget plan(s) checked.\n"
    );
    if violations.is_empty() {
        md.push_str("No budget, conservation or byte-accounting violations.\n");
    } else {
        for v in violations {
            let _ = writeln!(md, "- {v}");
        }
    }
    md
}
