use serde::{Deserialize, Serialize};

use super::{AttentionObserver, AttentionSnapshot, Model, TokenMap};
use crate::cache::{CacheAudit, CachePolicy, KvCache};
use crate::error::Result;
use crate::geometry::ScaleSchedule;

/// Cache contents read by one scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleCacheStats {
    pub scale: usize,
    pub retained_per_layer: Vec<usize>,
    pub retained_tokens: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub prompt_seed: u64,
    pub policy: String,
    pub vocab: usize,
    pub token_maps: Vec<TokenMap>,
    /// Logits of every scale, `tokens_in(k) x vocab`.
    pub scale_logits: Vec<Vec<f32>>,
    pub cache_stats: Vec<ScaleCacheStats>,
    pub audit: CacheAudit,
    /// Filled only when generation ran with a collecting observer.
    pub snapshots: Vec<AttentionSnapshot>,
}

impl GenerationTrace {
    pub fn final_logits(&self) -> &[f32] {
        self.scale_logits.last().map_or(&[], Vec::as_slice)
    }

    pub fn peak_bytes(&self) -> u64 {
        self.cache_stats.iter().map(|s| s.bytes).max().unwrap_or(0)
    }

    /// Bytes held while the last scale runs.
    pub fn end_bytes(&self) -> u64 {
        self.cache_stats.last().map_or(0, |s| s.bytes)
    }

    pub fn end_retained_tokens(&self) -> usize {
        self.cache_stats.last().map_or(0, |s| s.retained_tokens)
    }
}

/// Greedy next-scale generation under `policy`.
pub fn generate(
    model: &Model,
    policy: &CachePolicy,
    schedule: &ScaleSchedule,
    prompt_seed: u64,
) -> Result<GenerationTrace> {
    run(model, policy, schedule, prompt_seed, 4, None)
}

/// As [`generate`], accounting `bytes_per_element` bytes per stored scalar.
pub fn generate_with(
    model: &Model,
    policy: &CachePolicy,
    schedule: &ScaleSchedule,
    prompt_seed: u64,
    bytes_per_element: usize,
) -> Result<GenerationTrace> {
    run(model, policy, schedule, prompt_seed, bytes_per_element, None)
}

/// As [`generate`], streaming every attention snapshot to `observer`.
pub fn generate_observed(
    model: &Model,
    policy: &CachePolicy,
    schedule: &ScaleSchedule,
    prompt_seed: u64,
    observer: &mut dyn AttentionObserver,
) -> Result<GenerationTrace> {
    run(model, policy, schedule, prompt_seed, 4, Some(observer))
}

fn run(
    model: &Model,
    policy: &CachePolicy,
    schedule: &ScaleSchedule,
    prompt_seed: u64,
    bytes_per_element: usize,
    mut observer: Option<&mut (dyn AttentionObserver + '_)>,
) -> Result<GenerationTrace> {
    let cfg = model.config();
    policy.validate(cfg, schedule)?;
    let mut cache = KvCache::new(cfg, policy.clone()).with_bytes_per_element(bytes_per_element);
    cache.prefill(&model.prefill(prompt_seed))?;

    let kk = schedule.num_scales();
    let mut maps: Vec<TokenMap> = Vec::with_capacity(kk);
    let mut logits = Vec::with_capacity(kk);
    let mut stats = Vec::with_capacity(kk);
    let mut audit = CacheAudit {
        policy: policy.name().to_string(),
        bytes_per_token: cache.bytes_per_token(),
        steps: Vec::with_capacity(kk),
    };
    for k in 0..kk {
        cache.check_compliance(schedule)?;
        let step = cache.audit_step(schedule);
        stats.push(ScaleCacheStats {
            scale: k,
            retained_per_layer: step.layers.iter().map(|l| l.retained.len()).collect(),
            retained_tokens: step.retained_tokens(),
            bytes: step.bytes,
        });
        audit.steps.push(step);

        let out = model.forward_scale(&cache, schedule, k, maps.last(), observer.as_deref_mut())?;
        let (h, w) = schedule.dims(k);
        maps.push(TokenMap {
            rows: h,
            cols: w,
            tokens: out.argmax_tokens(cfg.vocab),
        });
        if k + 1 < kk {
            cache.end_of_scale_compress(schedule, k, &out.states)?;
        }
        logits.push(out.logits);
    }
    Ok(GenerationTrace {
        prompt_seed,
        policy: policy.name().to_string(),
        vocab: cfg.vocab,
        token_maps: maps,
        scale_logits: logits,
        cache_stats: stats,
        audit,
        snapshots: Vec::new(),
    })
}
