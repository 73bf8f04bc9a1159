use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::window::WindowSpec;
use crate::analysis::RolePlan;
use crate::budget::BudgetPlan;
use crate::error::{Error, Result};
use crate::geometry::ScaleSchedule;
use crate::model::ModelConfig;

/// Eviction policy applied at every scale boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum CachePolicy {
    Full,
    /// Keep the most recent `tokens` positions.
    SlidingWindow {
        tokens: usize,
    },
    /// Keep the first `sinks` positions and the most recent `recent`.
    Streaming {
        sinks: usize,
        recent: usize,
    },
    /// Observation-window top-k with the same budget for every layer.
    SnapKv {
        budget: usize,
        window: WindowSpec,
    },
    /// Observation-window top-k with a depth-decreasing budget plan.
    Pyramid {
        plan: BudgetPlan,
        window: WindowSpec,
    },
    /// Observation-window top-k with a drafter/refiner budget plan.
    ScaleKv {
        roles: RolePlan,
        plan: BudgetPlan,
        window: WindowSpec,
    },
}

impl CachePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            CachePolicy::Full => "full",
            CachePolicy::SlidingWindow { .. } => "sliding_window",
            CachePolicy::Streaming { .. } => "streaming",
            CachePolicy::SnapKv { .. } => "snapkv",
            CachePolicy::Pyramid { .. } => "pyramid",
            CachePolicy::ScaleKv { .. } => "scalekv",
        }
    }

    /// Nominal history budget for `layer` while generating scale `k`;
    /// `None` means unbounded.
    pub fn history_budget(&self, layer: usize, k: usize) -> Option<usize> {
        match self {
            CachePolicy::Full => None,
            CachePolicy::SlidingWindow { tokens } => Some(*tokens),
            CachePolicy::Streaming { sinks, recent } => Some(sinks + recent),
            CachePolicy::SnapKv { budget, .. } => Some(*budget),
            CachePolicy::Pyramid { plan, .. } | CachePolicy::ScaleKv { plan, .. } => Some(plan.budget(layer, k)),
        }
    }

    pub fn window(&self) -> Option<&WindowSpec> {
        match self {
            CachePolicy::SnapKv { window, .. }
            | CachePolicy::Pyramid { window, .. }
            | CachePolicy::ScaleKv { window, .. } => Some(window),
            _ => None,
        }
    }

    /// Checks parameters against the model and schedule. Budgets that cannot
    /// hold the observation window of the preceding scale are a budget error.
    pub fn validate(&self, config: &ModelConfig, schedule: &ScaleSchedule) -> Result<()> {
        let kk = schedule.num_scales();
        let check_plan = |plan: &BudgetPlan| -> Result<()> {
            if plan.layers() != config.layers || plan.scales() != kk {
                return Err(Error::Config(format!(
                    "budget plan is {}x{}, model/schedule need {}x{kk}",
                    plan.layers(),
                    plan.scales(),
                    config.layers
                )));
            }
            Ok(())
        };
        match self {
            CachePolicy::Full => {}
            CachePolicy::SlidingWindow { tokens } => {
                if *tokens == 0 {
                    return Err(Error::Config("sliding window must keep at least one token".into()));
                }
            }
            CachePolicy::Streaming { sinks, recent } => {
                if sinks + recent == 0 {
                    return Err(Error::Config("streaming policy must keep at least one token".into()));
                }
            }
            CachePolicy::SnapKv { .. } => {}
            CachePolicy::Pyramid { plan, .. } => check_plan(plan)?,
            CachePolicy::ScaleKv { roles, plan, .. } => {
                check_plan(plan)?;
                if roles.layers() != config.layers || roles.scales() != kk {
                    return Err(Error::Config(format!(
                        "role plan is {}x{}, model/schedule need {}x{kk}",
                        roles.layers(),
                        roles.scales(),
                        config.layers
                    )));
                }
            }
        }
        if let Some(window) = self.window() {
            for k in 1..kk {
                let (h, w) = schedule.dims(k - 1);
                let need = window.size_for_map(h, w)?;
                for l in 0..config.layers {
                    let b = self.history_budget(l, k).unwrap_or(usize::MAX);
                    if b < need {
                        return Err(Error::Budget(format!(
                            "{} budget {b} at layer {l}, scale {k} is below the {need}-token observation window",
                            self.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Policy section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    Full,
    SlidingWindow {
        #[serde(default)]
        w: Option<usize>,
    },
    Streaming {
        #[serde(default)]
        sinks: Option<usize>,
        #[serde(default)]
        recent: Option<usize>,
    },
    Snapkv {
        #[serde(default)]
        budget: Option<usize>,
        #[serde(default)]
        window: WindowSpec,
    },
    Pyramid {
        #[serde(default)]
        budget_plan: Option<PathBuf>,
        #[serde(default)]
        window: WindowSpec,
    },
    Scalekv {
        role_plan: PathBuf,
        #[serde(default)]
        budget_plan: Option<PathBuf>,
        #[serde(default)]
        window: WindowSpec,
    },
}

pub(crate) fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
