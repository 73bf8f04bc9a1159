//! Per-`(layer, scale)` history budgets.
//!
//! Every plan conserves memory scale by scale: the budgets of the `L` layers
//! at scale `k` always sum to `B_uniform * L`, so the global total is
//! `B_uniform * L * K`. A budget for scale `k` bounds the history that
//! layer keeps while generating scale `k`.
//!
//! In the drafter/refiner plan refiners follow `B_r(k) = B_r(0) - decay * k`
//! (floored at `min_budget`) and drafters at the same scale split what the
//! refiners gave up.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::RolePlan;
use crate::error::{Error, Result};
use crate::geometry::ScaleSchedule;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetPlan {
    /// Layer-major: `budgets[l * scales + k]`.
    budgets: Vec<usize>,
    layers: usize,
    scales: usize,
    pub b_uniform: usize,
    pub refiner_base: usize,
    pub decay: usize,
    pub min_budget: usize,
    /// `(drafters, refiners)` per scale; empty for plans without roles.
    pub counts: Vec<(usize, usize)>,
}

/// Inputs of [`scalekv_plan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleKvParams {
    pub b_uniform: usize,
    /// `B_r(0)`.
    pub refiner_base: usize,
    /// Tokens removed from each refiner per scale step.
    pub decay: usize,
    pub min_budget: usize,
    /// Conditioning tokens ahead of the first scale; part of every history.
    pub prefix_tokens: usize,
}

impl BudgetPlan {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn budget(&self, l: usize, k: usize) -> usize {
        self.budgets[l * self.scales + k]
    }

    pub fn scale_sum(&self, k: usize) -> usize {
        (0..self.layers).map(|l| self.budget(l, k)).sum()
    }

    pub fn global_sum(&self) -> usize {
        self.budgets.iter().sum()
    }

    /// History tokens layer `l` can actually keep at scale `k`.
    pub fn effective_budget(&self, l: usize, k: usize, schedule: &ScaleSchedule, prefix_tokens: usize) -> usize {
        self.budget(l, k).min(schedule.history_len(k, prefix_tokens))
    }

    /// Per-scale and global conservation plus the floor; an invariant error
    /// names the first violation.
    pub fn check(&self) -> Result<()> {
        let target = self.b_uniform * self.layers;
        for k in 0..self.scales {
            let s = self.scale_sum(k);
            if s != target {
                return Err(Error::Invariant(format!(
                    "scale {k} budgets sum to {s}, expected {} * {} = {target}",
                    self.b_uniform, self.layers
                )));
            }
        }
        if self.global_sum() != target * self.scales {
            return Err(Error::Invariant(
                "global budget sum differs from B_uniform * L * K".into(),
            ));
        }
        if let Some(pos) = self.budgets.iter().position(|&b| b < self.min_budget) {
            return Err(Error::Invariant(format!(
                "layer {} scale {} budget {} is below the floor {}",
                pos / self.scales,
                pos % self.scales,
                self.budgets[pos],
                self.min_budget
            )));
        }
        Ok(())
    }

    /// Caps budgets at each scale's history length, handing freed tokens to
    /// the uncapped layers of the same scale (shallowest first for the
    /// remainder). See [`cap_scale`].
    pub fn capped_to_history(mut self, schedule: &ScaleSchedule, prefix_tokens: usize) -> Result<Self> {
        if schedule.num_scales() != self.scales {
            return Err(Error::Config(format!(
                "plan has {} scales, schedule {}",
                self.scales,
                schedule.num_scales()
            )));
        }
        let order: Vec<usize> = (0..self.layers).collect();
        for k in 0..self.scales {
            let mut col: Vec<usize> = (0..self.layers).map(|l| self.budget(l, k)).collect();
            cap_scale(
                &mut col,
                schedule.history_len(k, prefix_tokens),
                std::slice::from_ref(&order),
            );
            for (l, b) in col.into_iter().enumerate() {
                self.budgets[l * self.scales + k] = b;
            }
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        let file = BudgetPlanFile {
            b_uniform: self.b_uniform,
            refiner_base: self.refiner_base,
            decay: self.decay,
            min_budget: self.min_budget,
            budgets: (0..self.layers)
                .flat_map(|l| (0..self.scales).map(move |k| (l, k)))
                .map(|(l, k)| (l, k, self.budget(l, k)))
                .collect(),
        };
        serde_json::to_string(&file).expect("budget plan serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::json(path, source),
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BudgetPlanFile = serde_json::from_str(text).map_err(|e| Error::json("<budget plan>", e))?;
        let layers = file.budgets.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let scales = file.budgets.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let mut budgets = vec![None; layers * scales];
        for &(l, k, b) in &file.budgets {
            budgets[l * scales + k] = Some(b);
        }
        let budgets: Option<Vec<usize>> = budgets.into_iter().collect();
        let budgets = budgets.filter(|b| !b.is_empty()).ok_or_else(|| Error::Parse {
            path: "<budget plan>".into(),
            line: 0,
            message: format!("budgets do not cover {layers} x {scales} cells"),
        })?;
        Ok(BudgetPlan {
            budgets,
            layers,
            scales,
            b_uniform: file.b_uniform,
            refiner_base: file.refiner_base,
            decay: file.decay,
            min_budget: file.min_budget,
            counts: Vec::new(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetPlanFile {
    b_uniform: usize,
    refiner_base: usize,
    decay: usize,
    min_budget: usize,
    budgets: Vec<(usize, usize, usize)>,
}

fn check_common(b_uniform: usize, layers: usize, scales: usize, min_budget: usize) -> Result<()> {
    if layers == 0 || scales == 0 {
        return Err(Error::Config("plans need at least one layer and one scale".into()));
    }
    if b_uniform < min_budget {
        return Err(Error::Config(format!(
            "B_uniform {b_uniform} is below the minimum budget {min_budget}"
        )));
    }
    Ok(())
}

/// Every `(l, k)` gets `b_uniform`.
pub fn uniform_plan(b_uniform: usize, layers: usize, scales: usize, min_budget: usize) -> Result<BudgetPlan> {
    check_common(b_uniform, layers, scales, min_budget)?;
    Ok(BudgetPlan {
        budgets: vec![b_uniform; layers * scales],
        layers,
        scales,
        b_uniform,
        refiner_base: b_uniform,
        decay: 0,
        min_budget,
        counts: Vec::new(),
    })
}

/// Linearly decreasing with depth, the same at every scale:
/// `raw_l = B_uniform + slope * ((L - 1) / 2 - l)`, floored, with the
/// integer remainder granted one token each from the shallowest layer down.
pub fn pyramid_plan(
    b_uniform: usize,
    layers: usize,
    scales: usize,
    min_budget: usize,
    slope: f64,
) -> Result<BudgetPlan> {
    check_common(b_uniform, layers, scales, min_budget)?;
    if !slope.is_finite() || slope < 0.0 {
        return Err(Error::Config(format!(
            "pyramid slope must be finite and >= 0, got {slope}"
        )));
    }
    let centre = (layers as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..layers)
        .map(|l| b_uniform as f64 + slope * (centre - l as f64))
        .collect();
    let deepest = raw[layers - 1];
    if deepest < min_budget as f64 {
        return Err(Error::Config(format!(
            "slope {slope} drives the deepest layer to {deepest:.2}, below the floor {min_budget}"
        )));
    }
    let mut col: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let target = b_uniform * layers;
    let mut sum: usize = col.iter().sum();
    // floors sum to at most the target; rounding noise may overshoot by a token
    let mut i = layers;
    while sum > target {
        i = if i == 0 { layers - 1 } else { i - 1 };
        if col[i] > min_budget {
            col[i] -= 1;
            sum -= 1;
        }
    }
    let mut i = 0;
    while sum < target {
        col[i % layers] += 1;
        sum += 1;
        i += 1;
    }
    let mut budgets = vec![0; layers * scales];
    for (l, b) in col.iter().enumerate() {
        for k in 0..scales {
            budgets[l * scales + k] = *b;
        }
    }
    Ok(BudgetPlan {
        budgets,
        layers,
        scales,
        b_uniform,
        refiner_base: b_uniform,
        decay: 0,
        min_budget,
        counts: Vec::new(),
    })
}

/// Refiner budget at scale `k`: `max(B_r(0) - decay * k, min_budget)`.
pub fn refiner_budget(params: &ScaleKvParams, k: usize) -> usize {
    params
        .refiner_base
        .saturating_sub(params.decay.saturating_mul(k))
        .max(params.min_budget)
}

/// Splits `total` equally over `members`; the remainder goes one token each
/// in `members` order.
fn share(col: &mut [usize], members: &[usize], total: usize) {
    if members.is_empty() {
        return;
    }
    let each = total / members.len();
    let rem = total % members.len();
    for (i, &l) in members.iter().enumerate() {
        col[l] += each + usize::from(i < rem);
    }
}

/// Caps every entry of `col` at `cap`, returning freed tokens to uncapped
/// layers of the first tier that still has any, until nothing is freed.
/// If every layer sits at the cap the leftovers are spread over all tiers
/// regardless of the cap (the scale is saturated and nothing is evicted),
/// which keeps the column sum unchanged.
fn cap_scale(col: &mut [usize], cap: usize, tiers: &[Vec<usize>]) {
    loop {
        let mut freed = 0;
        for b in col.iter_mut() {
            if *b > cap {
                freed += *b - cap;
                *b = cap;
            }
        }
        if freed == 0 {
            return;
        }
        let open = tiers
            .iter()
            .map(|t| t.iter().copied().filter(|&l| col[l] < cap).collect::<Vec<_>>())
            .find(|t| !t.is_empty());
        match open {
            Some(members) => share(col, &members, freed),
            None => {
                let all: Vec<usize> = tiers.iter().flatten().copied().collect();
                share(col, &all, freed);
                return;
            }
        }
    }
}

/// Drafter/refiner plan. At every scale refiners get [`refiner_budget`];
/// the rest of `B_uniform * L` is split equally among that scale's drafters
/// (remainder by ascending Z). Scales without drafters give it back to the
/// refiners. Budgets are then capped at the scale's history length with
/// freed tokens going to drafters first, then refiners.
pub fn scalekv_plan(roles: &RolePlan, params: &ScaleKvParams, schedule: &ScaleSchedule) -> Result<BudgetPlan> {
    let (layers, scales) = (roles.layers(), roles.scales());
    check_common(params.b_uniform, layers, scales, params.min_budget)?;
    if params.refiner_base > params.b_uniform {
        return Err(Error::Config(format!(
            "B_r(0) = {} exceeds B_uniform = {}",
            params.refiner_base, params.b_uniform
        )));
    }
    if schedule.num_scales() != scales {
        return Err(Error::Config(format!(
            "role plan has {scales} scales, schedule {}",
            schedule.num_scales()
        )));
    }
    let total = params.b_uniform * layers;
    let mut budgets = vec![0; layers * scales];
    let mut counts = Vec::with_capacity(scales);
    for k in 0..scales {
        let drafters = roles.layers_at(k, true);
        let refiners = roles.layers_at(k, false);
        counts.push((drafters.len(), refiners.len()));
        let br = refiner_budget(params, k);
        let mut col = vec![0usize; layers];
        for &l in &refiners {
            col[l] = br;
        }
        let surplus = total - br * refiners.len();
        if drafters.is_empty() {
            share(&mut col, &refiners, surplus);
        } else {
            share(&mut col, &drafters, surplus);
        }
        cap_scale(
            &mut col,
            schedule.history_len(k, params.prefix_tokens),
            &[drafters, refiners],
        );
        for (l, b) in col.into_iter().enumerate() {
            budgets[l * scales + k] = b;
        }
    }
    let plan = BudgetPlan {
        budgets,
        layers,
        scales,
        b_uniform: params.b_uniform,
        refiner_base: params.refiner_base,
        decay: params.decay,
        min_budget: params.min_budget,
        counts,
    };
    plan.check()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{select_drafters, AsiTable};

    fn roles(layers: usize, scales: usize, n_d: usize) -> RolePlan {
        let values: Vec<f64> = (0..layers * scales).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        select_drafters(&AsiTable::new(layers, scales, values, 16).unwrap(), n_d).unwrap()
    }

    #[test]
    fn uniform_large_model_scale() {
        let p = uniform_plan(650, 32, 13, 16).unwrap();
        assert!((0..13).all(|k| p.scale_sum(k) == 20_800));
        assert!((0..32).all(|l| p.budget(l, 5) == 650));
        p.check().unwrap();
        assert!(uniform_plan(15, 4, 4, 16).is_err());
        let floor = uniform_plan(16, 4, 4, 16).unwrap();
        assert!((0..4).all(|l| floor.budget(l, 2) == 16));
    }

    #[test]
    fn pyramid_hand_example() {
        let p = pyramid_plan(100, 4, 3, 16, 40.0).unwrap();
        assert_eq!(
            (0..4).map(|l| p.budget(l, 0)).collect::<Vec<_>>(),
            vec![160, 120, 80, 40]
        );
        assert_eq!(p.scale_sum(2), 400);
        p.check().unwrap();
    }

    #[test]
    fn pyramid_zero_slope_is_uniform() {
        let a = pyramid_plan(77, 5, 4, 16, 0.0).unwrap();
        let b = uniform_plan(77, 5, 4, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pyramid_remainder_to_shallow_layers() {
        // raw [110.5, 103.5, 96.5, 89.5] floors to 398; +1 to layers 0 and 1
        let p = pyramid_plan(100, 4, 1, 16, 7.0).unwrap();
        assert_eq!(
            (0..4).map(|l| p.budget(l, 0)).collect::<Vec<_>>(),
            vec![111, 104, 96, 89]
        );
        assert!(pyramid_plan(100, 4, 1, 16, 60.0).is_err());
        assert!(pyramid_plan(100, 4, 1, 16, -1.0).is_err());
    }

    #[test]
    fn all_refiners_without_decay_is_uniform() {
        let s = ScaleSchedule::square_linear(13).unwrap();
        let r = RolePlan::all_refiners(8, 13);
        let params = ScaleKvParams {
            b_uniform: 40,
            refiner_base: 30,
            decay: 0,
            min_budget: 16,
            prefix_tokens: 10_000,
        };
        let p = scalekv_plan(&r, &params, &s).unwrap();
        let u = uniform_plan(40, 8, 13, 16).unwrap();
        assert!((0..8).all(|l| (0..13).all(|k| p.budget(l, k) == u.budget(l, k))));
    }

    #[test]
    fn refiner_decay_schedule() {
        let s = ScaleSchedule::square_linear(13).unwrap();
        let r = roles(8, 13, 24);
        let params = ScaleKvParams {
            b_uniform: 650,
            refiner_base: 600,
            decay: 70,
            min_budget: 16,
            prefix_tokens: 100_000,
        };
        let p = scalekv_plan(&r, &params, &s).unwrap();
        for k in 1..13 {
            let br = refiner_budget(&params, k);
            assert_eq!(br, 600usize.saturating_sub(70 * k).max(16));
            for l in r.layers_at(k, false) {
                if !r.layers_at(k, true).is_empty() {
                    assert_eq!(p.budget(l, k), br);
                }
            }
            for l in r.layers_at(k, true) {
                assert!(p.budget(l, k) >= br);
            }
        }
        assert_eq!(refiner_budget(&params, 1), 530);
        assert_eq!(refiner_budget(&params, 2), 460);
        assert_eq!(refiner_budget(&params, 9), 16);
    }

    #[test]
    fn capping_keeps_conservation() {
        let s = ScaleSchedule::square_linear(6).unwrap();
        let r = roles(4, 6, 6);
        let params = ScaleKvParams {
            b_uniform: 30,
            refiner_base: 25,
            decay: 5,
            min_budget: 4,
            prefix_tokens: 2,
        };
        let p = scalekv_plan(&r, &params, &s).unwrap();
        p.check().unwrap();
        // scale 4 has 32 history tokens; no unsaturated layer exceeds it
        for k in 0..6 {
            let hist = s.history_len(k, 2);
            if 4 * hist > 4 * 30 {
                assert!((0..4).all(|l| p.budget(l, k) <= hist), "scale {k}");
            }
        }
    }

    #[test]
    fn refiner_base_above_uniform_rejected() {
        let s = ScaleSchedule::square_linear(3).unwrap();
        let params = ScaleKvParams {
            b_uniform: 20,
            refiner_base: 21,
            decay: 0,
            min_budget: 4,
            prefix_tokens: 0,
        };
        assert!(matches!(
            scalekv_plan(&roles(2, 3, 1), &params, &s),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn effective_budget_caps() {
        let s = ScaleSchedule::square_linear(4).unwrap();
        let p = uniform_plan(650, 2, 4, 16).unwrap();
        assert_eq!(p.effective_budget(0, 0, &s, 0), 0);
        assert_eq!(p.effective_budget(0, 3, &s, 0), 14);
        let p = uniform_plan(20, 2, 4, 16).unwrap();
        assert_eq!(p.effective_budget(1, 3, &s, 10_000), 20);
    }

    #[test]
    fn json_roundtrip() {
        let p = pyramid_plan(100, 4, 3, 16, 40.0).unwrap();
        let back = BudgetPlan::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(v["budgets"][0], serde_json::json!([0, 0, 160]));
    }
}
