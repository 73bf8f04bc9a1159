//! Shows which tokens of a map form the observation window.

use scalekv::cache::{observation_window, observation_window_grid, WindowSpec};

fn draw(h: usize, w: usize, picked: &[usize]) {
    for r in 0..h {
        let line: String = (0..w)
            .map(|c| if picked.contains(&(r * w + c)) { " #" } else { " ." })
            .collect();
        println!("  {line}");
    }
}

fn main() -> scalekv::Result<()> {
    for (h, w, n) in [(8, 8, 16), (13, 13, 16), (6, 10, 4)] {
        let picked = observation_window(h, w, n)?;
        println!("{h}x{w} map, {n} patches -> {:?}", picked);
        draw(h, w, &picked);
    }
    let grid = observation_window_grid(5, 12, 1, 3)?;
    println!("5x12 map, 1x3 grid -> {grid:?}");
    draw(5, 12, &grid);

    // small maps clamp the grid so every patch has at least one token
    let spec = WindowSpec::default();
    for side in 1..=5 {
        println!(
            "{side}x{side} map keeps {} window tokens",
            spec.size_for_map(side, side)?
        );
    }
    Ok(())
}
