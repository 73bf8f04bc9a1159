use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scalekv::bench::CSV_HEADER;

fn scalekv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalekv")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.json");
    let text = format!(
        r#"{{
  "model": {{"layers": 4, "heads": 2, "d_model": 32, "vocab": 64, "seed": 1, "cond_tokens": 8}},
  "schedule": {{"preset": "square-linear", "K": 6}},
  "seeds": [0],
  "output_dir": "{}",
  "calibration": {{"seeds": [5, 6], "n_drafters": 4}},
  "bench": {{"budget_fractions": [0.2, 0.5], "window": 4}}{extra}
}}"#,
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn calibrate_bench_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    let missing = scalekv(&["bench", "--config", cfg]);
    assert_eq!(code(&missing), 1, "{}", String::from_utf8_lossy(&missing.stderr));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("calibrate"));

    let cal = scalekv(&["calibrate", "--config", cfg]);
    assert_eq!(code(&cal), 0, "{}", String::from_utf8_lossy(&cal.stderr));
    assert!(String::from_utf8_lossy(&cal.stdout).contains("r_6"));
    let first = std::fs::read(out.join("role_plan.json")).unwrap();
    assert_eq!(code(&scalekv(&["calibrate", "--config", cfg])), 0);
    assert_eq!(std::fs::read(out.join("role_plan.json")).unwrap(), first);

    let bench = scalekv(&["bench", "--config", cfg]);
    assert_eq!(code(&bench), 0, "{}", String::from_utf8_lossy(&bench.stderr));
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6 * 2);
    for r in rows.iter().filter(|r| r.starts_with("full,")) {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[3].parse::<f64>().unwrap(), 0.0);
        assert_eq!(f[4].parse::<f64>().unwrap(), 1.0);
    }
    assert!(out.join("bench_summary.json").is_file());
    assert!(out.join("plans").join("scalekv_f0.2.json").is_file());
    assert!(out.join("audits").join("snapkv_f0.5_s0.json").is_file());

    let csv_path = out.join("bench.csv");
    let report = scalekv(&[
        "report",
        csv_path.to_str().unwrap(),
        "--out",
        dir.path().join("rep").to_str().unwrap(),
    ]);
    assert_eq!(code(&report), 0, "{}", String::from_utf8_lossy(&report.stderr));
    let md = String::from_utf8_lossy(&report.stdout);
    assert!(md.contains("## Budget 20%"));
    assert!(md.contains("No budget, conservation or byte-accounting violations."));
    assert!(dir.path().join("rep").join("report.md").is_file());

    // inject a violation into one audit: a budget smaller than what is retained
    let audit_path = out.join("audits").join("snapkv_f0.2_s0.json");
    let mut audit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&audit_path).unwrap()).unwrap();
    audit["steps"][4]["layers"][0]["budget"] = serde_json::json!(1);
    std::fs::write(&audit_path, audit.to_string()).unwrap();
    let bad = scalekv(&["report", csv_path.to_str().unwrap()]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("VIOLATION"));
}

#[test]
fn report_on_single_full_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    std::fs::write(&csv, format!("{CSV_HEADER}\nfull,0.1,0,0,1,0,1024,32,1.5\n")).unwrap();
    let o = scalekv(&["report", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let md = String::from_utf8_lossy(&o.stdout);
    assert!(md.contains("| 1 | full | 1 | 0.000000e0 | 1.0000 |"), "{md}");
    assert!(!md.contains("| 2 |"));
}

#[test]
fn malformed_csv_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    std::fs::write(
        &csv,
        format!("{CSV_HEADER}\nfull,0.1,0,0,1,0,1024,32,1.5\nsnapkv,0.1,zero,0,1,0,1,1,1\n"),
    )
    .unwrap();
    let o = scalekv(&["report", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn generate_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    let missing = scalekv(&["inspect", "--config", cfg]);
    assert_eq!(code(&missing), 1);

    let g = scalekv(&["generate", "--config", cfg, "--seed", "3", "--snapshots"]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    let trace = out.join("trace");
    for f in [
        "scale_00.csv",
        "scale_05.csv",
        "snapshots.bin",
        "stats.json",
        "audit.json",
    ] {
        assert!(trace.join(f).is_file(), "{f}");
    }

    let i = scalekv(&["inspect", "--config", cfg]);
    assert_eq!(code(&i), 0, "{}", String::from_utf8_lossy(&i.stderr));
    let samples = std::fs::read_to_string(out.join("inspect").join("nca_samples.csv")).unwrap();
    // one head-averaged sample per layer and query row of every scale: 4 * (1 + 4 + ... + 36)
    assert_eq!(samples.lines().count() - 1, 4 * 91);
    let groups = std::fs::read_to_string(out.join("inspect").join("nca_groups.csv")).unwrap();
    assert_eq!(groups.lines().next(), Some("small,large"));
    let asi = std::fs::read_to_string(out.join("inspect").join("asi_table.csv")).unwrap();
    assert_eq!(asi.lines().count() - 1, 4 * 6);

    let filtered = scalekv(&["inspect", "--config", cfg, "--layer", "1", "--scale", "2"]);
    assert_eq!(code(&filtered), 0);
    let samples = std::fs::read_to_string(out.join("inspect").join("nca_samples.csv")).unwrap();
    assert_eq!(samples.lines().count() - 1, 9);
}

#[test]
fn config_and_usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#", "colour": "blue""#);
    let o = scalekv(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    assert_eq!(code(&scalekv(&["frobnicate"])), 1);
    assert_eq!(code(&scalekv(&["report"])), 1);
    assert_eq!(code(&scalekv(&["--help"])), 0);

    let bad_fraction = small_config(dir.path(), r#", "budget_fraction": 1.5"#);
    assert_eq!(
        code(&scalekv(&["generate", "--config", bad_fraction.to_str().unwrap()])),
        1
    );
}

#[test]
fn generate_with_snapkv_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        r#", "policy": {"kind": "snapkv", "window": [2, 2]}, "budget_fraction": 0.3"#,
    );
    let o = scalekv(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/trace/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["policy"], "snapkv");
    // B = round(0.3 * (8 + 55)) = 19 per layer entering the last scale
    assert_eq!(stats["scales"][5]["retained_tokens"], 4 * 19);
}
