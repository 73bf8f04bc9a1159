use super::ops::{add_in_place, dot, gelu, layer_norm, matmul, softmax_in_place};
use super::{AttentionObserver, AttentionSnapshot, LayerWeights, Model, TokenMap, MLP_RATIO};
use crate::cache::KvCache;
use crate::error::{Error, Result};
use crate::geometry::ScaleSchedule;

/// Projections of the current block's tokens at one layer, `n x d_model` each.
#[derive(Debug, Clone, Default)]
pub struct LayerStates {
    pub queries: Vec<f32>,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ScaleOutput {
    pub scale: usize,
    /// `n x vocab`, row-major.
    pub logits: Vec<f32>,
    /// One entry per layer.
    pub states: Vec<LayerStates>,
}

impl ScaleOutput {
    /// Greedy decode; ties go to the lower token id.
    pub fn argmax_tokens(&self, vocab: usize) -> Vec<u32> {
        self.logits
            .chunks_exact(vocab)
            .map(|row| super::ops::argmax(row) as u32)
            .collect()
    }
}

struct History<'a> {
    keys: &'a [f32],
    values: &'a [f32],
    len: usize,
}

impl Model {
    /// Runs the conditioning block (bidirectional among itself) and returns
    /// its per-layer states for the cache.
    pub fn prefill(&self, prompt_seed: u64) -> Vec<LayerStates> {
        let n = self.config.cond_tokens;
        let x = self.cond_embeddings(prompt_seed);
        let (_, states) = self.run_block(
            x,
            n,
            &|_| History {
                keys: &[],
                values: &[],
                len: 0,
            },
            usize::MAX,
            None,
        );
        states
    }

    /// Forward pass for scale `k` against whatever history `cache` retains.
    ///
    /// `prev` is the previous scale's token map and must be `None` exactly
    /// when `k == 0`.
    pub fn forward_scale(
        &self,
        cache: &KvCache,
        schedule: &ScaleSchedule,
        k: usize,
        prev: Option<&TokenMap>,
        observer: Option<&mut (dyn AttentionObserver + '_)>,
    ) -> Result<ScaleOutput> {
        if k >= schedule.num_scales() {
            return Err(Error::Index {
                what: "scale",
                index: k,
                len: schedule.num_scales(),
            });
        }
        if !cache.is_prefilled() || cache.scales_done() != k {
            return Err(Error::Sequencing(format!(
                "cache holds {} completed scales (prefilled: {}), cannot run scale {k}",
                cache.scales_done(),
                cache.is_prefilled()
            )));
        }
        if cache.num_layers() != self.config.layers {
            return Err(Error::Sequencing(format!(
                "cache has {} layers, model has {}",
                cache.num_layers(),
                self.config.layers
            )));
        }
        match (k, prev) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::Sequencing("scale 0 takes no previous map".into())),
            (_, None) => return Err(Error::Sequencing(format!("scale {k} needs the previous map"))),
            (_, Some(m)) => {
                if (m.rows, m.cols) != schedule.dims(k - 1) {
                    return Err(Error::Sequencing(format!(
                        "previous map is {}x{}, schedule expects {:?}",
                        m.rows,
                        m.cols,
                        schedule.dims(k - 1)
                    )));
                }
            }
        }

        let dims = schedule.dims(k);
        let n = dims.0 * dims.1;
        let x = self.scale_inputs(k, dims, prev);
        let history = |l: usize| {
            let layer = cache.layer(l);
            History {
                keys: layer.keys(),
                values: layer.values(),
                len: layer.len(),
            }
        };
        let (x, states) = self.run_block(x, n, &history, k, observer);
        let logits = matmul(
            &layer_norm(&x, self.config.d_model),
            n,
            self.config.d_model,
            &self.head,
            self.config.vocab,
        );
        Ok(ScaleOutput {
            scale: k,
            logits,
            states,
        })
    }

    fn run_block<'a>(
        &self,
        mut x: Vec<f32>,
        n: usize,
        history: &dyn Fn(usize) -> History<'a>,
        scale: usize,
        mut observer: Option<&mut (dyn AttentionObserver + '_)>,
    ) -> (Vec<f32>, Vec<LayerStates>) {
        let d = self.config.d_model;
        let mut states = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.iter().enumerate() {
            let h = layer_norm(&x, d);
            let q = matmul(&h, n, d, &w.wq, d);
            let k = matmul(&h, n, d, &w.wk, d);
            let v = matmul(&h, n, d, &w.wv, d);
            let hist = history(l);
            let attn = self.attend(&q, &k, &v, n, &hist, l, scale, observer.as_deref_mut());
            add_in_place(&mut x, &matmul(&attn, n, d, &w.wo, d));
            self.mlp(&mut x, n, w);
            states.push(LayerStates {
                queries: q,
                keys: k,
                values: v,
            });
        }
        (x, states)
    }

    fn mlp(&self, x: &mut [f32], n: usize, w: &LayerWeights) {
        let d = self.config.d_model;
        let h = layer_norm(x, d);
        let mut hidden = matmul(&h, n, d, &w.w1, MLP_RATIO * d);
        hidden.iter_mut().for_each(|v| *v = gelu(*v));
        add_in_place(x, &matmul(&hidden, n, MLP_RATIO * d, &w.w2, d));
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        q: &[f32],
        k: &[f32],
        v: &[f32],
        n: usize,
        hist: &History<'_>,
        layer: usize,
        scale: usize,
        mut observer: Option<&mut (dyn AttentionObserver + '_)>,
    ) -> Vec<f32> {
        let d = self.config.d_model;
        let dk = self.config.d_k();
        let cols = hist.len + n;
        let inv_sqrt = 1.0 / (dk as f32).sqrt();
        let mut out = vec![0.0f32; n * d];
        let mut scores = vec![0.0f32; cols];
        for head in 0..self.config.heads {
            let hs = head * dk..(head + 1) * dk;
            let mut captured = observer.as_ref().map(|_| Vec::with_capacity(n * cols));
            for i in 0..n {
                let qi = &q[i * d..(i + 1) * d][hs.clone()];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = if j < hist.len {
                        &hist.keys[j * d..(j + 1) * d]
                    } else {
                        &k[(j - hist.len) * d..(j - hist.len + 1) * d]
                    };
                    *s = dot(qi, &kj[hs.clone()]) * inv_sqrt;
                }
                softmax_in_place(&mut scores);
                let oi = &mut out[i * d..(i + 1) * d][hs.clone()];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = if j < hist.len {
                        &hist.values[j * d..(j + 1) * d]
                    } else {
                        &v[(j - hist.len) * d..(j - hist.len + 1) * d]
                    };
                    for (o, &vv) in oi.iter_mut().zip(&vj[hs.clone()]) {
                        *o += p * vv;
                    }
                }
                if let Some(buf) = captured.as_mut() {
                    buf.extend_from_slice(&scores);
                }
            }
            if let (Some(obs), Some(weights)) = (observer.as_deref_mut(), captured) {
                obs.observe(AttentionSnapshot {
                    layer,
                    scale,
                    head,
                    rows: n,
                    cols,
                    weights,
                });
            }
        }
        out
    }

    /// Uncached recomputation of every scale's logits over the full
    /// concatenated sequence `[cond; scale 0; ...; scale K-1]` with a
    /// block-causal mask. Scale `k`'s inputs come from `maps[k - 1]`.
    ///
    /// This shares only the embedding code with the cached path and serves
    /// as the reference for full-cache generation.
    pub fn forward_reference(
        &self,
        prompt_seed: u64,
        schedule: &ScaleSchedule,
        maps: &[TokenMap],
    ) -> Result<Vec<Vec<f32>>> {
        let kk = schedule.num_scales();
        if maps.len() + 1 < kk {
            return Err(Error::Shape(format!(
                "need {} maps to rebuild {kk} scales, got {}",
                kk - 1,
                maps.len()
            )));
        }
        let d = self.config.d_model;
        let dk = self.config.d_k();
        let cond = self.config.cond_tokens;

        let mut x = self.cond_embeddings(prompt_seed);
        let mut block = vec![0usize; cond];
        for k in 0..kk {
            let prev = if k == 0 { None } else { Some(&maps[k - 1]) };
            x.extend(self.scale_inputs(k, schedule.dims(k), prev));
            block.extend(std::iter::repeat_n(k + 1, schedule.tokens_in(k)));
        }
        let t = block.len();

        for w in &self.layers {
            let h = layer_norm(&x, d);
            let q = matmul(&h, t, d, &w.wq, d);
            let k = matmul(&h, t, d, &w.wk, d);
            let v = matmul(&h, t, d, &w.wv, d);
            let mut attn = vec![0.0f32; t * d];
            for head in 0..self.config.heads {
                let take = |m: &[f32]| -> Vec<f32> {
                    m.chunks_exact(d)
                        .flat_map(|r| r[head * dk..(head + 1) * dk].iter().copied())
                        .collect()
                };
                let qh = take(&q);
                let vh = take(&v);
                let kh = take(&k);
                let mut kt = vec![0.0f32; dk * t];
                for j in 0..t {
                    for c in 0..dk {
                        kt[c * t + j] = kh[j * dk + c];
                    }
                }
                let mut s = matmul(&qh, t, dk, &kt, t);
                let scale = 1.0 / (dk as f32).sqrt();
                for i in 0..t {
                    let row = &mut s[i * t..(i + 1) * t];
                    for (j, val) in row.iter_mut().enumerate() {
                        *val = if block[j] <= block[i] {
                            *val * scale
                        } else {
                            f32::NEG_INFINITY
                        };
                    }
                    softmax_in_place(row);
                }
                let oh = matmul(&s, t, t, &vh, dk);
                for i in 0..t {
                    attn[i * d + head * dk..i * d + (head + 1) * dk].copy_from_slice(&oh[i * dk..(i + 1) * dk]);
                }
            }
            add_in_place(&mut x, &matmul(&attn, t, d, &w.wo, d));
            self.mlp(&mut x, t, w);
        }

        let normed = layer_norm(&x, d);
        let mut out = Vec::with_capacity(kk);
        for k in 0..kk {
            let start = (cond + schedule.offset(k)) * d;
            let n = schedule.tokens_in(k);
            out.push(matmul(
                &normed[start..start + n * d],
                n,
                d,
                &self.head,
                self.config.vocab,
            ));
        }
        Ok(out)
    }
}
