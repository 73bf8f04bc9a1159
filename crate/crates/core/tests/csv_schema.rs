use scalekv::bench::{build_report, read_csv, write_csv, BenchRow, CSV_HEADER, CSV_SCHEMA_VERSION};
use scalekv::Error;

const GOLDEN_HEADER: &str =
    "policy,budget_fraction,seed,logit_mse,token_agreement,mean_kl,peak_bytes,retained_tokens,wall_ms";

fn row(policy: &str, fraction: f64, seed: u64, mse: f64) -> BenchRow {
    BenchRow {
        policy: policy.into(),
        budget_fraction: fraction,
        seed,
        logit_mse: mse,
        token_agreement: 0.5,
        mean_kl: mse / 10.0,
        peak_bytes: 4096,
        retained_tokens: 100,
        wall_ms: 3.0,
    }
}

#[test]
fn header_is_pinned() {
    assert_eq!(CSV_HEADER, GOLDEN_HEADER);
    assert_eq!(CSV_SCHEMA_VERSION, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.csv");
    write_csv(&path, &[row("snapkv", 0.1, 0, 1.0)]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some(GOLDEN_HEADER));
    assert_eq!(read_csv(&path).unwrap(), vec![row("snapkv", 0.1, 0, 1.0)]);
}

#[test]
fn altered_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.csv");
    std::fs::write(&path, GOLDEN_HEADER.replace("wall_ms", "wall_s") + "\n").unwrap();
    assert!(matches!(read_csv(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn merged_runs_recompute_means() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    write_csv(
        &a.join("bench.csv"),
        &[row("snapkv", 0.1, 0, 1.0), row("streaming", 0.1, 0, 4.0)],
    )
    .unwrap();
    write_csv(
        &b.join("bench.csv"),
        &[
            row("snapkv", 0.1, 1, 2.0),
            row("snapkv", 0.1, 2, 6.0),
            row("streaming", 0.1, 1, 2.0),
        ],
    )
    .unwrap();
    let report = build_report(&[a.join("bench.csv"), b.join("bench.csv")]).unwrap();
    let mean = |p: &str| report.summary.groups.iter().find(|g| g.policy == p).unwrap().logit_mse;
    assert_eq!(mean("snapkv"), 3.0);
    assert_eq!(mean("streaming"), 3.0);
    assert_eq!(
        report
            .summary
            .groups
            .iter()
            .find(|g| g.policy == "snapkv")
            .unwrap()
            .runs,
        3
    );
    assert!(report.violations.is_empty());
    // equal means rank by name
    let snap = report.markdown.find("| 1 | snapkv |").unwrap();
    let stream = report.markdown.find("| 2 | streaming |").unwrap();
    assert!(snap < stream);
}

#[test]
fn failed_trend_is_surfaced() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    write_csv(&path, &[row("snapkv", 0.1, 0, 1.0), row("scalekv", 0.1, 0, 2.0)]).unwrap();
    let report = build_report(std::slice::from_ref(&path)).unwrap();
    assert!(!report.summary.trend.as_ref().unwrap().holds);
    assert!(report.markdown.contains("WARNING: EXPECTED TREND FAILED"));

    write_csv(&path, &[row("snapkv", 0.1, 0, 2.0), row("scalekv", 0.1, 0, 1.0)]).unwrap();
    let report = build_report(&[path]).unwrap();
    assert!(report.summary.trend.unwrap().holds);
    assert!(!report.markdown.contains("TREND FAILED"));
}
