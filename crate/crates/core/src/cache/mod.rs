//! KV cache store and eviction policies.
//!
//! The cache holds, per layer, the key/value rows of every history token it
//! retains, in ascending absolute position. Conditioning tokens occupy
//! positions `0..prefix`; scale `k` occupies `prefix + offset(k) ..`.
//!
//! Eviction runs once per scale boundary in [`KvCache::end_of_scale_compress`]:
//! the finished scale's tokens join the candidates and the policy trims each
//! layer to its budget for the next scale. Budgets count every retained
//! history token, observation-window tokens included.

mod audit;
mod policy;
mod select;
mod window;

use rayon::prelude::*;

pub use audit::{AuditStep, CacheAudit, LayerAudit};
pub(crate) use policy::resolve_path;
pub use policy::{CachePolicy, PolicyConfig};
pub use select::{importance_scores, select_retained, sinks_and_recent, sliding_window, ImportanceScores};
pub use window::{observation_window, observation_window_grid, WindowSpec, DEFAULT_WINDOW};

use crate::error::{Error, Result};
use crate::geometry::ScaleSchedule;
use crate::model::{LayerStates, ModelConfig};

/// Retained entries of one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    positions: Vec<usize>,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn push_block(&mut self, start: usize, keys: &[f32], values: &[f32], width: usize) {
        let n = keys.len() / width;
        self.positions.extend(start..start + n);
        self.keys.extend_from_slice(keys);
        self.values.extend_from_slice(values);
    }

    /// Keep only `retained` (ascending subset of current positions).
    fn retain(&mut self, retained: &[usize], width: usize) {
        if retained.len() == self.positions.len() {
            return;
        }
        let mut keys = Vec::with_capacity(retained.len() * width);
        let mut values = Vec::with_capacity(retained.len() * width);
        let mut it = retained.iter().peekable();
        for (row, &p) in self.positions.iter().enumerate() {
            if it.peek() == Some(&&p) {
                it.next();
                keys.extend_from_slice(&self.keys[row * width..(row + 1) * width]);
                values.extend_from_slice(&self.values[row * width..(row + 1) * width]);
            }
        }
        self.positions = retained.to_vec();
        self.keys = keys;
        self.values = values;
    }
}

#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    heads: usize,
    d_k: usize,
    policy: CachePolicy,
    bytes_per_element: usize,
    prefix: Option<usize>,
    scales_done: usize,
    window: Vec<usize>,
}

impl KvCache {
    pub fn new(config: &ModelConfig, policy: CachePolicy) -> Self {
        KvCache {
            layers: vec![LayerCache::default(); config.layers],
            heads: config.heads,
            d_k: config.d_k(),
            policy,
            bytes_per_element: 4,
            prefix: None,
            scales_done: 0,
            window: Vec::new(),
        }
    }

    /// Element width used for byte accounting (4 for f32, 2 to model half precision).
    pub fn with_bytes_per_element(mut self, bytes: usize) -> Self {
        self.bytes_per_element = bytes;
        self
    }

    pub fn policy(&self) -> &CachePolicy {
        &self.policy
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub fn is_prefilled(&self) -> bool {
        self.prefix.is_some()
    }

    pub fn prefix_tokens(&self) -> usize {
        self.prefix.unwrap_or(0)
    }

    pub fn scales_done(&self) -> usize {
        self.scales_done
    }

    /// Absolute indices of the last observation window.
    pub fn window_indices(&self) -> &[usize] {
        &self.window
    }

    fn width(&self) -> usize {
        self.heads * self.d_k
    }

    /// Stores the conditioning block; must precede every scale.
    pub fn prefill(&mut self, states: &[LayerStates]) -> Result<()> {
        if self.prefix.is_some() {
            return Err(Error::Sequencing("cache already prefilled".into()));
        }
        self.check_states(states)?;
        let width = self.width();
        let n = states.first().map_or(0, |s| s.keys.len() / width);
        for (layer, st) in self.layers.iter_mut().zip(states) {
            layer.push_block(0, &st.keys, &st.values, width);
        }
        self.prefix = Some(n);
        Ok(())
    }

    fn check_states(&self, states: &[LayerStates]) -> Result<()> {
        if states.len() != self.layers.len() {
            return Err(Error::Sequencing(format!(
                "got states for {} layers, cache has {}",
                states.len(),
                self.layers.len()
            )));
        }
        let width = self.width();
        if states
            .iter()
            .any(|s| s.keys.len() % width != 0 || s.keys.len() != s.values.len())
        {
            return Err(Error::Shape("layer key/value blocks have inconsistent widths".into()));
        }
        Ok(())
    }

    /// Effective history budget of `layer` at scale `k`: the policy's nominal
    /// budget capped by the full history length. `None` when unbounded.
    pub fn effective_budget(&self, schedule: &ScaleSchedule, layer: usize, k: usize) -> Option<usize> {
        let hist = schedule.history_len(k, self.prefix_tokens());
        self.policy.history_budget(layer, k).map(|b| b.min(hist))
    }

    /// Appends scale `k`'s keys/values and evicts down to the budgets for
    /// scale `k + 1`. `states` are the forward pass's per-layer projections;
    /// score-based policies read the window queries from them.
    pub fn end_of_scale_compress(&mut self, schedule: &ScaleSchedule, k: usize, states: &[LayerStates]) -> Result<()> {
        if !self.is_prefilled() || self.scales_done != k {
            return Err(Error::Sequencing(format!(
                "compress for scale {k} but cache has {} completed scales",
                self.scales_done
            )));
        }
        if k + 1 >= schedule.num_scales() {
            return Err(Error::Sequencing(format!("scale {k} is the last; nothing follows it")));
        }
        self.check_states(states)?;
        let width = self.width();
        let n = schedule.tokens_in(k);
        if states.iter().any(|s| s.keys.len() != n * width) {
            return Err(Error::Shape(format!("scale {k} states do not hold {n} tokens")));
        }
        let start = schedule.history_len(k, self.prefix_tokens());
        let (h, w) = schedule.dims(k);
        let window: Vec<usize> = match self.policy.window() {
            Some(spec) => spec.for_map(h, w)?.into_iter().map(|i| start + i).collect(),
            None => Vec::new(),
        };
        if self.policy.window().is_some() && states.iter().any(|s| s.queries.len() != n * width) {
            return Err(Error::Sequencing(format!("window queries missing for scale {k}")));
        }

        let budgets: Vec<Option<usize>> = (0..self.layers.len())
            .map(|l| self.effective_budget(schedule, l, k + 1))
            .collect();
        let policy = &self.policy;
        let (heads, d_k) = (self.heads, self.d_k);
        self.layers
            .par_iter_mut()
            .zip(states.par_iter())
            .zip(budgets.par_iter())
            .try_for_each(|((layer, st), budget)| -> Result<()> {
                layer.push_block(start, &st.keys, &st.values, width);
                let Some(budget) = *budget else { return Ok(()) };
                if budget >= layer.len() {
                    return Ok(());
                }
                let retained = match policy {
                    CachePolicy::Full => return Ok(()),
                    CachePolicy::SlidingWindow { .. } => sliding_window(&layer.positions, budget),
                    CachePolicy::Streaming { sinks, .. } => {
                        let s = (*sinks).min(budget);
                        sinks_and_recent(&layer.positions, s, budget - s)
                    }
                    CachePolicy::SnapKv { .. } | CachePolicy::Pyramid { .. } | CachePolicy::ScaleKv { .. } => {
                        let mut q = Vec::with_capacity(window.len() * width);
                        for &p in &window {
                            let i = p - start;
                            q.extend_from_slice(&st.queries[i * width..(i + 1) * width]);
                        }
                        let scores = ImportanceScores {
                            scale: k,
                            window: window.clone(),
                            candidates: layer.positions.clone(),
                            scores: importance_scores(&q, &layer.keys, heads, d_k)?,
                        };
                        select_retained(&scores, budget, &window)
                    }
                };
                layer.retain(&retained, width);
                Ok(())
            })?;
        self.window = window;
        self.scales_done = k + 1;
        Ok(())
    }

    /// `sum over layers of retained * 2 (K and V) * heads * d_k * bytes_per_element`.
    pub fn cache_bytes(&self) -> u64 {
        self.retained_tokens() as u64 * self.bytes_per_token()
    }

    pub fn bytes_per_token(&self) -> u64 {
        (2 * self.heads * self.d_k * self.bytes_per_element) as u64
    }

    pub fn retained_tokens(&self) -> usize {
        self.layers.iter().map(LayerCache::len).sum()
    }

    /// Fails with an invariant error if any layer holds more history than its
    /// effective budget for the next scale to run.
    pub fn check_compliance(&self, schedule: &ScaleSchedule) -> Result<()> {
        let k = self.scales_done;
        if k == 0 {
            return Ok(());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(b) = self.effective_budget(schedule, l, k) {
                if layer.len() > b {
                    return Err(Error::Invariant(format!(
                        "{}: layer {l} retains {} tokens entering scale {k}, budget {b}",
                        self.policy.name(),
                        layer.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Snapshot of what the next scale will read.
    pub fn audit_step(&self, schedule: &ScaleSchedule) -> AuditStep {
        let k = self.scales_done;
        AuditStep {
            scale: k,
            bytes: self.cache_bytes(),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| LayerAudit {
                    layer: l,
                    budget: if k == 0 {
                        None
                    } else {
                        self.effective_budget(schedule, l, k)
                    },
                    retained: layer.positions.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            vocab: 16,
            seed: 1,
            cond_tokens: 2,
        }
    }

    fn block(n: usize, width: usize, seed: f32) -> LayerStates {
        let v: Vec<f32> = (0..n * width).map(|i| ((i as f32) * 0.37 + seed).sin()).collect();
        LayerStates {
            queries: v.clone(),
            keys: v.clone(),
            values: v,
        }
    }

    #[test]
    fn empty_cache_has_no_bytes() {
        let c = KvCache::new(&cfg(), CachePolicy::Full);
        assert_eq!(c.cache_bytes(), 0);
    }

    #[test]
    fn one_token_bytes() {
        let config = ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            ..cfg()
        };
        let mut c = KvCache::new(&config, CachePolicy::Full);
        let states = [block(1, 64, 0.0), LayerStates::default()];
        c.layers[0].push_block(0, &states[0].keys, &states[0].values, 64);
        // 2 (K,V) * 4 heads * 16 d_k * 4 bytes
        assert_eq!(c.cache_bytes(), 512);
        let c = c.with_bytes_per_element(2);
        assert_eq!(c.cache_bytes(), 256);
    }

    #[test]
    fn full_policy_keeps_everything() {
        let s = ScaleSchedule::square_linear(3).unwrap();
        let mut c = KvCache::new(&cfg(), CachePolicy::Full);
        c.prefill(&[block(2, 64, 0.0), block(2, 64, 1.0)]).unwrap();
        c.end_of_scale_compress(&s, 0, &[block(1, 64, 2.0), block(1, 64, 3.0)])
            .unwrap();
        c.end_of_scale_compress(&s, 1, &[block(4, 64, 2.0), block(4, 64, 3.0)])
            .unwrap();
        assert_eq!(c.layer(0).positions(), &[0, 1, 2, 3, 4, 5, 6]);
        assert!(c
            .end_of_scale_compress(&s, 2, &[block(9, 64, 2.0), block(9, 64, 3.0)])
            .is_err());
    }

    #[test]
    fn streaming_and_sliding_prefix() {
        let s = ScaleSchedule::from_explicit(vec![(1, 1), (2, 2), (3, 3)]).unwrap();
        for (policy, expect) in [
            (CachePolicy::Streaming { sinks: 1, recent: 3 }, vec![0, 4, 5, 6]),
            (CachePolicy::SlidingWindow { tokens: 4 }, vec![3, 4, 5, 6]),
        ] {
            let mut c = KvCache::new(&cfg(), policy);
            c.prefill(&[block(2, 64, 0.0), block(2, 64, 1.0)]).unwrap();
            c.end_of_scale_compress(&s, 0, &[block(1, 64, 0.0), block(1, 64, 0.0)])
                .unwrap();
            c.end_of_scale_compress(&s, 1, &[block(4, 64, 0.0), block(4, 64, 0.0)])
                .unwrap();
            assert_eq!(c.layer(1).positions(), expect.as_slice());
            c.check_compliance(&s).unwrap();
        }
    }

    #[test]
    fn snapkv_floor_keeps_window_only() {
        // 16-token budget right after a 4x4 map: exactly its window survives.
        let s = ScaleSchedule::from_explicit(vec![(4, 4), (8, 8)]).unwrap();
        let mut c = KvCache::new(
            &cfg(),
            CachePolicy::SnapKv {
                budget: 16,
                window: WindowSpec::default(),
            },
        );
        c.prefill(&[block(2, 64, 0.0), block(2, 64, 1.0)]).unwrap();
        c.end_of_scale_compress(&s, 0, &[block(16, 64, 0.0), block(16, 64, 5.0)])
            .unwrap();
        for l in 0..2 {
            assert_eq!(c.layer(l).len(), 16);
            assert_eq!(c.layer(l).positions(), &(2..18).collect::<Vec<_>>()[..]);
        }
        assert_eq!(c.window_indices().len(), 16);
    }

    #[test]
    fn sequencing_errors() {
        let s = ScaleSchedule::square_linear(3).unwrap();
        let mut c = KvCache::new(&cfg(), CachePolicy::Full);
        assert!(matches!(
            c.end_of_scale_compress(&s, 0, &[block(1, 64, 0.0), block(1, 64, 0.0)]),
            Err(Error::Sequencing(_))
        ));
        c.prefill(&[block(2, 64, 0.0), block(2, 64, 1.0)]).unwrap();
        assert!(matches!(
            c.end_of_scale_compress(&s, 1, &[block(4, 64, 0.0), block(4, 64, 0.0)]),
            Err(Error::Sequencing(_))
        ));
        let policy = CachePolicy::SnapKv {
            budget: 16,
            window: WindowSpec::default(),
        };
        let mut c = KvCache::new(&cfg(), policy);
        c.prefill(&[block(2, 64, 0.0), block(2, 64, 1.0)]).unwrap();
        let mut st = block(1, 64, 0.0);
        st.queries.clear();
        assert!(matches!(
            c.end_of_scale_compress(&s, 0, &[st.clone(), st]),
            Err(Error::Sequencing(_))
        ));
    }
}
