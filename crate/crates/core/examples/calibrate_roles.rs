//! Calibrates drafter/refiner roles on the toy model and saves them as JSON.
//!
//! ```text
//! cargo run --release --example calibrate_roles -- roles.json
//! ```

use scalekv::analysis::{calibrate, load_calibration, save_calibration, DEFAULT_TOP_K};
use scalekv::geometry::ScaleSchedule;
use scalekv::model::{Model, ModelConfig};

fn main() -> scalekv::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "role_plan.json".into());
    let model = Model::new(ModelConfig::toy(0))?;
    let schedule = ScaleSchedule::square_linear(13)?;
    let seeds: Vec<u64> = (1000..1010).collect();
    let n_d = 24;

    let (roles, table) = calibrate(&model, &seeds, DEFAULT_TOP_K, n_d, &schedule)?;
    save_calibration(out.as_ref(), &roles, &table)?;
    let (reloaded, _) = load_calibration(out.as_ref())?;
    assert_eq!(reloaded.drafters(), roles.drafters());

    println!(
        "{n_d} drafters from {} prompts, table digest {}",
        seeds.len(),
        &table.digest()[..16]
    );
    println!("layer  drafter at scales (r_k)");
    for l in 0..roles.layers() {
        let ks: Vec<String> = (0..roles.scales())
            .filter(|&k| roles.is_drafter(l, k))
            .map(|k| format!("r_{}", k + 1))
            .collect();
        println!("{l:>5}  {}", ks.join(" "));
    }
    println!("saved to {out}");
    Ok(())
}
