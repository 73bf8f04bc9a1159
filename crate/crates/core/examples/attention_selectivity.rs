//! Prints the selectivity index and its per-scale Z-score for every layer.
//! Low Z marks layers whose attention spreads over earlier scales.

use scalekv::analysis::{AsiAccumulator, AsiTable, DEFAULT_TOP_K};
use scalekv::cache::CachePolicy;
use scalekv::geometry::ScaleSchedule;
use scalekv::model::{generate_observed, Model, ModelConfig};

fn main() -> scalekv::Result<()> {
    let cfg = ModelConfig::toy(0);
    let model = Model::new(cfg.clone())?;
    let schedule = ScaleSchedule::square_linear(9)?;
    let kk = schedule.num_scales();

    let mut acc = AsiAccumulator::new(cfg.layers, kk, cfg.heads, DEFAULT_TOP_K);
    generate_observed(&model, &CachePolicy::Full, &schedule, 42, &mut acc)?;
    let table = AsiTable::new(cfg.layers, kk, acc.finish()?, DEFAULT_TOP_K)?;

    print!("ASI    ");
    for k in 0..kk {
        print!("  r_{:<4}", k + 1);
    }
    println!();
    for l in 0..cfg.layers {
        print!("layer {l}");
        for k in 0..kk {
            print!(" {:>6.3}", table.value(l, k));
        }
        println!();
    }
    println!("\nZ");
    for l in 0..cfg.layers {
        print!("layer {l}");
        for k in 0..kk {
            print!(" {:>+6.2}", table.z(l, k));
        }
        println!();
    }
    Ok(())
}
