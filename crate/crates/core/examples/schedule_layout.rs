//! Prints a scale schedule and where each scale sits in the flattened sequence.
//!
//! ```text
//! cargo run --example schedule_layout -- 10
//! ```

use scalekv::geometry::ScaleSchedule;

fn main() -> scalekv::Result<()> {
    let scales: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(13);
    let prefix = 16;
    let schedule = ScaleSchedule::square_linear(scales)?;
    println!(
        "{scales} scales, {} map tokens, {prefix} conditioning tokens",
        schedule.total_tokens()
    );
    println!("scale   map   tokens  history   sequence range");
    for k in 0..scales {
        let p = schedule.partition_with_prefix(k, prefix)?;
        let (h, w) = schedule.dims(k);
        println!(
            "r_{:<3} {h:>2}x{w:<3} {:>6} {:>8}   {:?}",
            k + 1,
            p.current_len(),
            p.history_len(),
            p.current
        );
    }

    let odd = ScaleSchedule::from_explicit(vec![(1, 2), (2, 3), (4, 6)])?;
    println!("explicit schedule {:?}: {} tokens", odd.scales(), odd.total_tokens());
    match ScaleSchedule::from_explicit(vec![(2, 2), (1, 1)]) {
        Err(e) => println!("shrinking schedule rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
