//! Builds uniform, pyramid and drafter/refiner budget plans for the same
//! total and checks that each one conserves it at every scale.

use scalekv::analysis::{select_drafters, AsiTable};
use scalekv::budget::{pyramid_plan, scalekv_plan, uniform_plan, BudgetPlan, ScaleKvParams};
use scalekv::geometry::ScaleSchedule;

fn show(name: &str, plan: &BudgetPlan) {
    println!("{name} (B_uniform {}):", plan.b_uniform);
    for l in 0..plan.layers() {
        let row: Vec<String> = (0..plan.scales())
            .map(|k| format!("{:>4}", plan.budget(l, k)))
            .collect();
        println!("  layer {l}  {}", row.join(""));
    }
    let sums: Vec<usize> = (0..plan.scales()).map(|k| plan.scale_sum(k)).collect();
    println!("  per-scale sums {sums:?}, check: {:?}\n", plan.check().map(|_| "ok"));
}

fn main() -> scalekv::Result<()> {
    let (layers, scales, b) = (6, 8, 60);
    let schedule = ScaleSchedule::square_linear(scales)?;

    show("uniform", &uniform_plan(b, layers, scales, 16)?);
    show("pyramid", &pyramid_plan(b, layers, scales, 16, 8.0)?);

    // a made-up selectivity table: layer 1 and 4 spread their attention
    let values: Vec<f64> = (0..layers * scales)
        .map(|i| if matches!(i / scales, 1 | 4) { 0.2 } else { 0.8 } + 0.01 * (i % 7) as f64)
        .collect();
    let roles = select_drafters(&AsiTable::new(layers, scales, values, 16)?, 12)?;
    let params = ScaleKvParams {
        b_uniform: b,
        refiner_base: 55,
        decay: 6,
        min_budget: 16,
        prefix_tokens: 16,
    };
    show("scalekv", &scalekv_plan(&roles, &params, &schedule)?);
    Ok(())
}
