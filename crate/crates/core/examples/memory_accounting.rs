//! Cache bytes read by each scale under several policies at a 10% budget.

use scalekv::bench::{b_uniform_for, PolicyContext, PolicyKind, ScaleKvSection};
use scalekv::cache::WindowSpec;
use scalekv::geometry::ScaleSchedule;
use scalekv::model::{generate_with, Model, ModelConfig};

fn main() -> scalekv::Result<()> {
    let cfg = ModelConfig::toy(0);
    let model = Model::new(cfg.clone())?;
    let schedule = ScaleSchedule::square_linear(13)?;
    let section = ScaleKvSection::default();
    let ctx = PolicyContext {
        model: &cfg,
        schedule: &schedule,
        prefix: cfg.cond_tokens,
        window: WindowSpec::default(),
        roles: None,
        scalekv: &section,
    };
    let b = b_uniform_for(0.10, &schedule, cfg.cond_tokens)?;
    println!("B_uniform = {b} tokens per layer, half precision (2-byte elements)\n");

    let kinds = [
        PolicyKind::Full,
        PolicyKind::SlidingWindow,
        PolicyKind::Snapkv,
        PolicyKind::Pyramid,
    ];
    let mut traces = Vec::new();
    for kind in kinds {
        let (policy, _) = ctx.build(kind, b)?;
        traces.push(generate_with(&model, &policy, &schedule, 0, 2)?);
    }
    print!("scale ");
    for k in kinds {
        print!("{:>16}", k.name());
    }
    println!();
    for k in 0..schedule.num_scales() {
        print!("r_{:<4}", k + 1);
        for t in &traces {
            print!("{:>16}", t.cache_stats[k].bytes);
        }
        println!();
    }
    let full = traces[0].end_bytes() as f64;
    for (kind, t) in kinds.iter().zip(&traces) {
        println!(
            "{:<15} peak {:>9} B, final {:>9} B ({:.1}% of full)",
            kind.name(),
            t.peak_bytes(),
            t.end_bytes(),
            100.0 * t.end_bytes() as f64 / full
        );
    }
    Ok(())
}
