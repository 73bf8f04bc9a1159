//! A small deterministic next-scale-prediction transformer.
//!
//! Each step predicts a whole token map from the previous one (upsampled to
//! the new resolution). Queries of the current map attend to the cached
//! history plus every token of the current map; there is no causal mask
//! inside a map. A seeded block of conditioning embeddings stands in for a
//! text prompt and forms the head of the history.
//!
//! Weights are random: the model exists to produce realistic attention and
//! key/value tensors for the cache engine, not good images.

mod forward;
mod generate;
pub(crate) mod ops;
mod trace;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::MAX_SCALES;

pub use forward::{LayerStates, ScaleOutput};
pub use generate::{generate, generate_observed, generate_with, GenerationTrace, ScaleCacheStats};
pub use trace::{read_snapshots, write_snapshots};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Conditioning prefix length; these tokens sit in front of scale 0.
    #[serde(default = "default_cond_tokens")]
    pub cond_tokens: usize,
}

fn default_cond_tokens() -> usize {
    16
}

impl ModelConfig {
    /// The small configuration used throughout tests and examples.
    pub fn toy(seed: u64) -> Self {
        ModelConfig {
            layers: 8,
            heads: 4,
            d_model: 64,
            vocab: 256,
            seed,
            cond_tokens: 16,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config(format!("layers must be >= 2, got {}", self.layers)));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "d_model {} must be a multiple of 4 for 2-D positions",
                self.d_model
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab must be >= 2, got {}", self.vocab)));
        }
        Ok(())
    }
}

/// Integer token grid of one scale, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMap {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Vec<u32>,
}

impl TokenMap {
    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.tokens[r * self.cols + c]
    }

    /// Nearest-neighbour resize to `rows x cols`.
    pub fn upsample(&self, rows: usize, cols: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let sr = r * self.rows / rows;
            for c in 0..cols {
                out.push(self.get(sr, c * self.cols / cols));
            }
        }
        out
    }
}

/// Row-normalized attention of one `(layer, scale, head)`.
///
/// Rows are the current map's queries; columns are the history keys the
/// cache exposed at that step followed by the current map's keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSnapshot {
    pub layer: usize,
    pub scale: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
}

impl AttentionSnapshot {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    pub fn history_len(&self) -> usize {
        self.cols - self.rows
    }

    /// Partition implied by the snapshot's own shape.
    pub fn partition(&self) -> crate::geometry::SequencePartition {
        crate::geometry::SequencePartition::from_lengths(self.scale, self.history_len(), self.rows)
    }
}

/// Receives every attention snapshot as the forward pass produces it.
pub trait AttentionObserver {
    fn observe(&mut self, snapshot: AttentionSnapshot);
}

/// Keeps every snapshot in arrival order.
#[derive(Debug, Default)]
pub struct SnapshotCollector {
    pub snapshots: Vec<AttentionSnapshot>,
}

impl AttentionObserver for SnapshotCollector {
    fn observe(&mut self, snapshot: AttentionSnapshot) {
        self.snapshots.push(snapshot);
    }
}

pub(crate) struct LayerWeights {
    /// Query projection, pre-multiplied by the layer's attention gain.
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w1: Vec<f32>,
    pub w2: Vec<f32>,
}

pub struct Model {
    config: ModelConfig,
    token_emb: Vec<f32>,
    start_emb: Vec<f32>,
    scale_emb: Vec<f32>,
    layers: Vec<LayerWeights>,
    head: Vec<f32>,
}

const MLP_RATIO: usize = 4;

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let proj_std = 1.0 / (d as f32).sqrt();

        let token_emb = normal_vec(&mut rng, config.vocab * d, 1.0);
        let start_emb = normal_vec(&mut rng, d, 1.0);
        let scale_emb = normal_vec(&mut rng, MAX_SCALES * d, 0.5);
        let layers = (0..config.layers)
            .map(|_| {
                // Per-layer sharpness spreads layers between diffuse and peaked attention.
                let gain: f32 = rng.random_range(0.5..3.5);
                let mut wq = normal_vec(&mut rng, d * d, proj_std);
                wq.iter_mut().for_each(|w| *w *= gain);
                LayerWeights {
                    wq,
                    wk: normal_vec(&mut rng, d * d, proj_std),
                    wv: normal_vec(&mut rng, d * d, proj_std),
                    wo: normal_vec(&mut rng, d * d, proj_std * 0.5),
                    w1: normal_vec(&mut rng, d * MLP_RATIO * d, proj_std),
                    w2: normal_vec(&mut rng, MLP_RATIO * d * d, 0.5 / ((MLP_RATIO * d) as f32).sqrt()),
                }
            })
            .collect();
        let head = normal_vec(&mut rng, d * config.vocab, proj_std * 2.0);
        Ok(Model {
            config,
            token_emb,
            start_emb,
            scale_emb,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// SHA-256 over every weight, little-endian, in initialization order.
    pub fn weight_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |v: &[f32]| {
            for x in v {
                h.update(x.to_le_bytes());
            }
        };
        feed(&self.token_emb);
        feed(&self.start_emb);
        feed(&self.scale_emb);
        for l in &self.layers {
            for w in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                feed(w);
            }
        }
        feed(&self.head);
        hex::encode(h.finalize())
    }

    /// Conditioning embeddings for one prompt, `cond_tokens x d_model`.
    pub fn cond_embeddings(&self, prompt_seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(prompt_seed ^ 0x9e37_79b9_7f4a_7c15);
        normal_vec(&mut rng, self.config.cond_tokens * self.config.d_model, 1.0)
    }

    /// Input embeddings for scale `k`: the previous map upsampled to this
    /// resolution (or the start embedding at `k = 0`), plus position and
    /// scale embeddings.
    pub(crate) fn scale_inputs(&self, k: usize, dims: (usize, usize), prev: Option<&TokenMap>) -> Vec<f32> {
        let d = self.config.d_model;
        let (h, w) = dims;
        let upsampled = prev.map(|m| m.upsample(h, w));
        let scale = &self.scale_emb[k * d..(k + 1) * d];
        let mut x = Vec::with_capacity(h * w * d);
        for idx in 0..h * w {
            let base = match &upsampled {
                Some(t) => {
                    let t = t[idx] as usize;
                    &self.token_emb[t * d..(t + 1) * d]
                }
                None => &self.start_emb[..],
            };
            let pos = position_embedding(idx / w, idx % w, h, w, d);
            x.extend((0..d).map(|i| base[i] + scale[i] + pos[i]));
        }
        x
    }
}

/// 2-D sinusoidal embedding of normalized cell-centre coordinates, so the
/// same spatial location lines up across resolutions.
fn position_embedding(r: usize, c: usize, h: usize, w: usize, d: usize) -> Vec<f32> {
    let u = (r as f32 + 0.5) / h as f32;
    let v = (c as f32 + 0.5) / w as f32;
    let quarter = d / 4;
    let mut out = Vec::with_capacity(d);
    for coord in [u, v] {
        for i in 0..quarter {
            let freq = 32.0 * (1.0f32 / 64.0).powf(i as f32 / quarter as f32);
            out.push((coord * freq).sin());
            out.push((coord * freq).cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = Model::new(ModelConfig::toy(7)).unwrap();
        let b = Model::new(ModelConfig::toy(7)).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
    }

    #[test]
    fn seed_changes_weights() {
        let a = Model::new(ModelConfig::toy(7)).unwrap();
        let b = Model::new(ModelConfig::toy(8)).unwrap();
        assert_ne!(a.weight_checksum(), b.weight_checksum());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::toy(7)
        };
        assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_configs_rejected() {
        for cfg in [
            ModelConfig {
                layers: 1,
                ..ModelConfig::toy(1)
            },
            ModelConfig {
                vocab: 1,
                ..ModelConfig::toy(1)
            },
            ModelConfig {
                heads: 0,
                ..ModelConfig::toy(1)
            },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn upsample_nearest() {
        let m = TokenMap {
            rows: 2,
            cols: 2,
            tokens: vec![1, 2, 3, 4],
        };
        assert_eq!(m.upsample(4, 4)[..8], [1, 1, 2, 2, 1, 1, 2, 2]);
        assert_eq!(m.upsample(3, 3), vec![1, 1, 2, 1, 1, 2, 3, 3, 4]);
    }
}
