//! Compares how strongly small and large scales attend to their own map.
//! Values above 1 mean a token of the current map gets more than its share.

use scalekv::bench::{nca_samples, scale_groups};
use scalekv::cache::CachePolicy;
use scalekv::geometry::ScaleSchedule;
use scalekv::model::{generate_observed, Model, ModelConfig, SnapshotCollector};

fn main() -> scalekv::Result<()> {
    let model = Model::new(ModelConfig::toy(0))?;
    let schedule = ScaleSchedule::square_linear(13)?;
    let mut snaps = SnapshotCollector::default();
    generate_observed(&model, &CachePolicy::Full, &schedule, 3, &mut snaps)?;

    let samples = nca_samples(&snaps.snapshots)?;
    let (small, large) = scale_groups(schedule.num_scales());
    for (name, group) in [("small", &small), ("large", &large)] {
        let vals: Vec<f64> = samples
            .iter()
            .filter(|s| group.contains(&s.scale))
            .flat_map(|s| s.values.clone())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        let scales: Vec<String> = group.iter().map(|k| format!("r_{}", k + 1)).collect();
        println!(
            "{name:<5} scales {:<16} {:>5} samples, mean {mean:.3}, max {max:.3}",
            scales.join(","),
            vals.len()
        );
    }
    println!("\nper layer at r_{}:", schedule.num_scales() - 1);
    for s in samples.iter().filter(|s| s.scale == schedule.num_scales() - 2) {
        let mean = s.values.iter().sum::<f64>() / s.values.len() as f64;
        println!("  layer {} mean {mean:.3}", s.layer);
    }
    Ok(())
}
