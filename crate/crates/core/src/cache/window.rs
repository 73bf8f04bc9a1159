//! Observation windows: one centroid token per patch of a token map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a policy tiles each token map into observation patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WindowSpec {
    /// `N` patches on a `sqrt(N) x sqrt(N)` grid; `N` must be a perfect square.
    Patches(usize),
    /// Explicit `[grid_rows, grid_cols]`.
    Grid([usize; 2]),
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec::Patches(DEFAULT_WINDOW)
    }
}

pub const DEFAULT_WINDOW: usize = 16;

impl WindowSpec {
    pub fn grid(&self) -> Result<(usize, usize)> {
        match *self {
            WindowSpec::Patches(n) => {
                let g = (n as f64).sqrt().round() as usize;
                if n == 0 || g * g != n {
                    return Err(Error::Config(format!(
                        "window of {n} patches is not a perfect square; give an explicit [rows, cols] grid"
                    )));
                }
                Ok((g, g))
            }
            WindowSpec::Grid([r, c]) => {
                if r == 0 || c == 0 {
                    return Err(Error::Config(format!("window grid {r}x{c} is empty")));
                }
                Ok((r, c))
            }
        }
    }

    pub fn patches(&self) -> Result<usize> {
        self.grid().map(|(r, c)| r * c)
    }

    /// Window used on an `h x w` map: the configured grid, clamped per side so
    /// that maps smaller than the grid contribute every token.
    pub fn for_map(&self, h: usize, w: usize) -> Result<Vec<usize>> {
        let (gr, gc) = self.grid()?;
        observation_window_grid(h, w, gr.min(h), gc.min(w))
    }

    /// Window size on an `h x w` map after clamping.
    pub fn size_for_map(&self, h: usize, w: usize) -> Result<usize> {
        let (gr, gc) = self.grid()?;
        Ok(gr.min(h) * gc.min(w))
    }
}

/// Centroid tokens of `n` patches tiling an `h x w` map.
///
/// `n` is split into the most square `rows x cols` grid that fits the map
/// (the longer grid side goes along the longer map side).
pub fn observation_window(h: usize, w: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > h * w {
        return Err(Error::Config(format!("cannot place {n} patches on a {h}x{w} map")));
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n).filter(|d| n.is_multiple_of(*d)).map(|d| (d, n / d)).collect();
    pairs.sort_by_key(|&(a, b)| {
        (
            a.abs_diff(b),
            if h >= w {
                std::cmp::Reverse(a)
            } else {
                std::cmp::Reverse(b)
            },
        )
    });
    let (gr, gc) = pairs
        .into_iter()
        .find(|&(a, b)| a <= h && b <= w)
        .ok_or_else(|| Error::Config(format!("{n} patches do not factor into a grid fitting {h}x{w}")))?;
    observation_window_grid(h, w, gr, gc)
}

/// Centroid tokens of a `grid_rows x grid_cols` tiling, row-major local indices.
pub fn observation_window_grid(h: usize, w: usize, grid_rows: usize, grid_cols: usize) -> Result<Vec<usize>> {
    if grid_rows == 0 || grid_cols == 0 || grid_rows > h || grid_cols > w {
        return Err(Error::Config(format!(
            "patch grid {grid_rows}x{grid_cols} does not fit a {h}x{w} map"
        )));
    }
    let mid = |p: usize, g: usize, len: usize| {
        let start = p * len / g;
        let end = (p + 1) * len / g;
        (start + end - 1) / 2
    };
    let mut out = Vec::with_capacity(grid_rows * grid_cols);
    for pr in 0..grid_rows {
        let r = mid(pr, grid_rows, h);
        for pc in 0..grid_cols {
            out.push(r * w + mid(pc, grid_cols, w));
        }
    }
    Ok(out)
}
