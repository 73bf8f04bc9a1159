use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{load_calibration, RolePlan, DEFAULT_TOP_K};
use crate::budget::{pyramid_plan, scalekv_plan, uniform_plan, BudgetPlan, ScaleKvParams};
use crate::cache::{resolve_path, CachePolicy, PolicyConfig, WindowSpec};
use crate::error::{Error, Result};
use crate::geometry::{ScaleSchedule, ScheduleSpec};
use crate::model::ModelConfig;

/// Attention-sink positions kept by the streaming baseline.
pub const STREAMING_SINKS: usize = 4;
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.04, 0.10, 0.20];

/// One JSON document driving every subcommand. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleSpec,
    /// Policy used by `generate`.
    #[serde(default = "default_policy")]
    pub policy: PolicyConfig,
    /// Fraction of the full final-scale history granted per layer.
    #[serde(default)]
    pub budget_fraction: Option<f64>,
    /// Explicit per-layer budget; overrides `budget_fraction`.
    #[serde(default)]
    pub b_uniform: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: usize,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub scalekv: ScaleKvSection,
    /// Directory relative input paths resolve against; set by [`RunConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    #[serde(default = "default_calibration_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_top_k")]
    pub k_prime: usize,
    /// Defaults to a quarter of the non-initial `(layer, scale)` pairs.
    #[serde(default)]
    pub n_drafters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_fractions")]
    pub budget_fractions: Vec<f64>,
    /// Calibration file for the scalekv rows; defaults to `<output_dir>/role_plan.json`.
    #[serde(default)]
    pub role_plan: Option<PathBuf>,
    #[serde(default)]
    pub window: WindowSpec,
}

/// Refiner base and decay as fractions of `B_uniform`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleKvSection {
    #[serde(default = "default_refiner_ratio")]
    pub refiner_base_ratio: f64,
    #[serde(default = "default_decay_ratio")]
    pub decay_ratio: f64,
}

fn default_schedule() -> ScheduleSpec {
    ScheduleSpec::square_linear(13)
}
fn default_policy() -> PolicyConfig {
    PolicyConfig::Full
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("scalekv-out")
}
fn default_bytes_per_element() -> usize {
    4
}
fn default_calibration_seeds() -> Vec<u64> {
    (1000..1010).collect()
}
fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}
fn default_fractions() -> Vec<f64> {
    DEFAULT_FRACTIONS.to_vec()
}
fn default_refiner_ratio() -> f64 {
    600.0 / 650.0
}
fn default_decay_ratio() -> f64 {
    70.0 / 650.0
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            seeds: default_calibration_seeds(),
            k_prime: default_top_k(),
            n_drafters: None,
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            policies: default_policies(),
            budget_fractions: default_fractions(),
            role_plan: None,
            window: WindowSpec::default(),
        }
    }
}

impl Default for ScaleKvSection {
    fn default() -> Self {
        ScaleKvSection {
            refiner_base_ratio: default_refiner_ratio(),
            decay_ratio: default_decay_ratio(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Full,
    SlidingWindow,
    Streaming,
    Snapkv,
    Pyramid,
    Scalekv,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Full,
        PolicyKind::SlidingWindow,
        PolicyKind::Streaming,
        PolicyKind::Snapkv,
        PolicyKind::Pyramid,
        PolicyKind::Scalekv,
    ];

    /// Same spelling as [`CachePolicy::name`].
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::SlidingWindow => "sliding_window",
            PolicyKind::Streaming => "streaming",
            PolicyKind::Snapkv => "snapkv",
            PolicyKind::Pyramid => "pyramid",
            PolicyKind::Scalekv => "scalekv",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

impl RunConfig {
    /// The toy configuration with every default filled in.
    pub fn toy() -> Self {
        serde_json::from_value(serde_json::json!({ "model": ModelConfig::toy(0) })).expect("toy config deserializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must not be empty".into()));
        }
        if self.calibration.seeds.is_empty() {
            return Err(Error::Config("`calibration.seeds` must not be empty".into()));
        }
        if self.calibration.k_prime == 0 {
            return Err(Error::Config("`calibration.k_prime` must be at least 1".into()));
        }
        if let Some(f) = self.budget_fraction {
            check_fraction(f)?;
        }
        for &f in &self.bench.budget_fractions {
            check_fraction(f)?;
        }
        if self.bench.policies.is_empty() || self.bench.budget_fractions.is_empty() {
            return Err(Error::Config(
                "bench needs at least one policy and one budget fraction".into(),
            ));
        }
        if self.bytes_per_element == 0 {
            return Err(Error::Config("`bytes_per_element` must be positive".into()));
        }
        let s = &self.scalekv;
        if !(s.refiner_base_ratio.is_finite()
            && s.refiner_base_ratio >= 0.0
            && s.decay_ratio.is_finite()
            && s.decay_ratio >= 0.0)
        {
            return Err(Error::Config("scalekv ratios must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        self.schedule.build()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        resolve_path(&self.base_dir, p)
    }

    /// Calibration file read by scalekv bench rows.
    pub fn role_plan_path(&self) -> PathBuf {
        match &self.bench.role_plan {
            Some(p) => self.resolve(p),
            None => self.output_dir.join("role_plan.json"),
        }
    }

    /// `N_d`, defaulting to a quarter of the `(layer, scale)` pairs past scale 0.
    pub fn n_drafters(&self, schedule: &ScaleSchedule) -> usize {
        self.calibration
            .n_drafters
            .unwrap_or_else(|| (self.model.layers * schedule.num_scales().saturating_sub(1)).div_ceil(4))
    }

    /// `B_uniform` for the single-run commands.
    pub fn b_uniform(&self, schedule: &ScaleSchedule) -> Result<usize> {
        match (self.b_uniform, self.budget_fraction) {
            (Some(b), _) => Ok(b),
            (None, f) => b_uniform_for(f.unwrap_or(0.10), schedule, self.model.cond_tokens),
        }
    }

    /// Builds the `policy` section into a concrete policy.
    pub fn cache_policy(&self, schedule: &ScaleSchedule) -> Result<CachePolicy> {
        let b = self.b_uniform(schedule)?;
        let ctx = |window: &WindowSpec, roles: Option<RolePlan>| PolicyContext {
            model: &self.model,
            schedule,
            prefix: self.model.cond_tokens,
            window: *window,
            roles,
            scalekv: &self.scalekv,
        };
        let (policy, _) = match &self.policy {
            PolicyConfig::Full => ctx(&WindowSpec::default(), None).build(PolicyKind::Full, b)?,
            PolicyConfig::SlidingWindow { w } => {
                ctx(&WindowSpec::default(), None).build(PolicyKind::SlidingWindow, w.unwrap_or(b))?
            }
            PolicyConfig::Streaming { sinks, recent } => {
                let sinks = sinks.unwrap_or(STREAMING_SINKS);
                let recent = recent.unwrap_or(b.saturating_sub(sinks));
                (CachePolicy::Streaming { sinks, recent }, None)
            }
            PolicyConfig::Snapkv { budget, window } => {
                ctx(window, None).build(PolicyKind::Snapkv, budget.unwrap_or(b))?
            }
            PolicyConfig::Pyramid { budget_plan, window } => match budget_plan {
                Some(p) => (
                    CachePolicy::Pyramid {
                        plan: BudgetPlan::load(&self.resolve(p))?,
                        window: *window,
                    },
                    None,
                ),
                None => ctx(window, None).build(PolicyKind::Pyramid, b)?,
            },
            PolicyConfig::Scalekv {
                role_plan,
                budget_plan,
                window,
            } => {
                let (roles, _) = load_calibration(&self.resolve(role_plan))?;
                match budget_plan {
                    Some(p) => (
                        CachePolicy::ScaleKv {
                            roles,
                            plan: BudgetPlan::load(&self.resolve(p))?,
                            window: *window,
                        },
                        None,
                    ),
                    None => ctx(window, Some(roles)).build(PolicyKind::Scalekv, b)?,
                }
            }
        };
        policy.validate(&self.model, schedule)?;
        Ok(policy)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f.is_finite() && f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("budget fraction {f} is outside (0, 1]")))
    }
}

/// `round(fraction * history)` where history is the full prefix the last
/// scale attends to.
pub fn b_uniform_for(fraction: f64, schedule: &ScaleSchedule, prefix_tokens: usize) -> Result<usize> {
    check_fraction(fraction)?;
    let full = schedule.history_len(schedule.num_scales() - 1, prefix_tokens);
    Ok((fraction * full as f64).round() as usize)
}

/// Everything needed to turn a policy kind and `B_uniform` into a policy.
#[derive(Debug, Clone)]
pub struct PolicyContext<'a> {
    pub model: &'a ModelConfig,
    pub schedule: &'a ScaleSchedule,
    pub prefix: usize,
    pub window: WindowSpec,
    /// Required for [`PolicyKind::Scalekv`].
    pub roles: Option<RolePlan>,
    pub scalekv: &'a ScaleKvSection,
}

impl PolicyContext<'_> {
    /// Largest observation window over the schedule; the budget floor.
    pub fn min_budget(&self) -> Result<usize> {
        let mut m = 0;
        for &(h, w) in self.schedule.scales() {
            m = m.max(self.window.size_for_map(h, w)?);
        }
        Ok(m)
    }

    pub fn scalekv_params(&self, b: usize) -> Result<ScaleKvParams> {
        let bf = b as f64;
        Ok(ScaleKvParams {
            b_uniform: b,
            refiner_base: (bf * self.scalekv.refiner_base_ratio).round() as usize,
            decay: (bf * self.scalekv.decay_ratio).round() as usize,
            min_budget: self.min_budget()?,
            prefix_tokens: self.prefix,
        })
    }

    /// The policy plus its budget plan when it has one.
    pub fn build(&self, kind: PolicyKind, b: usize) -> Result<(CachePolicy, Option<BudgetPlan>)> {
        let (layers, scales) = (self.model.layers, self.schedule.num_scales());
        Ok(match kind {
            PolicyKind::Full => (CachePolicy::Full, None),
            PolicyKind::SlidingWindow => (CachePolicy::SlidingWindow { tokens: b }, None),
            PolicyKind::Streaming => {
                let sinks = STREAMING_SINKS.min(b);
                (
                    CachePolicy::Streaming {
                        sinks,
                        recent: b - sinks,
                    },
                    None,
                )
            }
            PolicyKind::Snapkv => (
                CachePolicy::SnapKv {
                    budget: b,
                    window: self.window,
                },
                None,
            ),
            PolicyKind::Pyramid => {
                let min = self.min_budget()?;
                let deepest = min.max(b / 2).min(b);
                let slope = if layers > 1 {
                    2.0 * (b - deepest) as f64 / (layers - 1) as f64
                } else {
                    0.0
                };
                let plan =
                    pyramid_plan(b, layers, scales, min, slope)?.capped_to_history(self.schedule, self.prefix)?;
                plan.check()?;
                (
                    CachePolicy::Pyramid {
                        plan: plan.clone(),
                        window: self.window,
                    },
                    Some(plan),
                )
            }
            PolicyKind::Scalekv => {
                let roles = self
                    .roles
                    .clone()
                    .ok_or_else(|| Error::Config("scalekv needs a role plan; run `calibrate` first".into()))?;
                let plan = scalekv_plan(&roles, &self.scalekv_params(b)?, self.schedule)?;
                plan.check()?;
                (
                    CachePolicy::ScaleKv {
                        roles,
                        plan: plan.clone(),
                        window: self.window,
                    },
                    Some(plan),
                )
            }
        })
    }

    /// Uniform plan at `b`, for comparisons against the other plans.
    pub fn uniform(&self, b: usize) -> Result<BudgetPlan> {
        uniform_plan(b, self.model.layers, self.schedule.num_scales(), self.min_budget()?)
    }
}
