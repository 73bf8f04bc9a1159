//! Calibrates, sweeps every policy over three budgets and prints the
//! markdown report. Writes into `./compare-out`.
//!
//! ```text
//! cargo run --release --example compare_policies
//! ```

use scalekv::bench::{cmd_bench, cmd_calibrate, cmd_report, RunConfig};

fn main() -> scalekv::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.output_dir = "compare-out".into();
    cfg.seeds = vec![0, 1];
    print!("{}", cmd_calibrate(&cfg)?);
    let bench = cmd_bench(&cfg)?;
    print!("{bench}");
    let report = cmd_report(&[bench.csv], Some(&cfg.output_dir))?;
    println!("\n{}", report.markdown);
    Ok(())
}
