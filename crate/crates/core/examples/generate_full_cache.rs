//! Generates one image-token pyramid with the full cache and checks it
//! against the uncached reference forward pass.

use std::time::Instant;

use scalekv::cache::CachePolicy;
use scalekv::geometry::ScaleSchedule;
use scalekv::model::{generate, Model, ModelConfig};

fn main() -> scalekv::Result<()> {
    let model = Model::new(ModelConfig::toy(0))?;
    let schedule = ScaleSchedule::square_linear(13)?;

    let t = Instant::now();
    let trace = generate(&model, &CachePolicy::Full, &schedule, 7)?;
    let cached = t.elapsed();

    let t = Instant::now();
    let reference = model.forward_reference(7, &schedule, &trace.token_maps)?;
    let uncached = t.elapsed();

    let max_diff = trace
        .scale_logits
        .iter()
        .flatten()
        .zip(reference.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);

    println!("weights sha256 {}", model.weight_checksum());
    for (k, map) in trace.token_maps.iter().enumerate() {
        let head: Vec<_> = map.tokens.iter().take(6).collect();
        println!("r_{:<2} {:>2}x{:<2} first tokens {:?}", k + 1, map.rows, map.cols, head);
    }
    println!("cached generation  {:>8.1?}", cached);
    println!("reference pass     {:>8.1?}", uncached);
    println!("max |cached - reference| = {max_diff:.3e}");
    println!("peak cache bytes   {}", trace.peak_bytes());
    Ok(())
}
