//! Attention selectivity analysis and drafter/refiner classification.
//!
//! For each `(layer, scale)` the Attention Selectivity Index is
//!
//! ```text
//! ASI = mean_i( sum_{j in current} a_ij ) * mean_i( topk_{K'}( a_ij : j in history ) )
//! ```
//!
//! averaged over heads. Values are standardized within each scale and the
//! `N_d` pairs with the lowest Z-scores become drafters; everything else is
//! a refiner. Scale 0 is pinned to `ASI = 1` and ranks behind every other
//! scale when picking drafters.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::CachePolicy;
use crate::error::{Error, Result};
use crate::geometry::{ScaleSchedule, SequencePartition};
use crate::model::{generate_observed, AttentionObserver, AttentionSnapshot, Model};

pub const DEFAULT_TOP_K: usize = 16;
pub const EPSILON: f64 = 1e-8;

fn check_shape(snapshot: &AttentionSnapshot, partition: &SequencePartition) -> Result<()> {
    // Rows may be any subset of the current map's queries.
    if snapshot.rows == 0 || partition.current_len() == 0 || snapshot.cols != partition.total_len() {
        return Err(Error::Shape(format!(
            "snapshot {}x{} does not match partition with {} history and {} current tokens",
            snapshot.rows,
            snapshot.cols,
            partition.history_len(),
            partition.current_len()
        )));
    }
    if snapshot.weights.len() != snapshot.rows * snapshot.cols {
        return Err(Error::Shape("snapshot weight buffer has the wrong length".into()));
    }
    Ok(())
}

fn mean_over_rows(snapshot: &AttentionSnapshot, f: impl Fn(&[f32]) -> f64) -> f64 {
    let total: f64 = (0..snapshot.rows).map(|i| f(snapshot.row(i))).sum();
    total / snapshot.rows as f64
}

/// Mean over queries of the attention mass on the current map.
pub fn current_attention_ratio(snapshot: &AttentionSnapshot, partition: &SequencePartition) -> Result<f64> {
    check_shape(snapshot, partition)?;
    let cur = partition.current.clone();
    Ok(mean_over_rows(snapshot, |row| {
        row[cur.clone()].iter().map(|&v| v as f64).sum()
    }))
}

/// Mean over queries of the sum of the `top_k` largest history weights.
/// Rows with fewer history columns sum all of them; no history gives 1.
pub fn history_topk_ratio(snapshot: &AttentionSnapshot, partition: &SequencePartition, top_k: usize) -> Result<f64> {
    check_shape(snapshot, partition)?;
    if top_k == 0 {
        return Err(Error::Config("K' must be at least 1".into()));
    }
    if partition.history_len() == 0 {
        return Ok(1.0);
    }
    let hist = partition.history.clone();
    let mut buf = Vec::with_capacity(hist.len());
    let mut total = 0.0;
    for i in 0..snapshot.rows {
        buf.clear();
        buf.extend(snapshot.row(i)[hist.clone()].iter().map(|&v| v as f64));
        let take = top_k.min(buf.len());
        if take < buf.len() {
            buf.select_nth_unstable_by(take - 1, |a, b| b.total_cmp(a));
        }
        total += buf[..take].iter().sum::<f64>();
    }
    Ok(total / snapshot.rows as f64)
}

/// Selectivity index of a single head.
pub fn asi_head(snapshot: &AttentionSnapshot, partition: &SequencePartition, top_k: usize) -> Result<f64> {
    Ok(current_attention_ratio(snapshot, partition)? * history_topk_ratio(snapshot, partition, top_k)?)
}

/// Selectivity index of a layer: the per-head index averaged over `heads`.
pub fn asi(heads: &[&AttentionSnapshot], partition: &SequencePartition, top_k: usize) -> Result<f64> {
    if heads.is_empty() {
        return Err(Error::Shape("no head snapshots".into()));
    }
    let mut sum = 0.0;
    for s in heads {
        sum += asi_head(s, partition, top_k)?;
    }
    Ok(sum / heads.len() as f64)
}

/// Per-query ratio of the average weight per current token to the average
/// weight per sequence token.
pub fn normalized_current_attention_rows(
    snapshot: &AttentionSnapshot,
    partition: &SequencePartition,
) -> Result<Vec<f64>> {
    check_shape(snapshot, partition)?;
    let cur = partition.current.clone();
    let scale = partition.total_len() as f64 / partition.current_len() as f64;
    Ok((0..snapshot.rows)
        .map(|i| {
            let row = snapshot.row(i);
            let mass: f64 = row[cur.clone()].iter().map(|&v| v as f64).sum();
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            mass / total * scale
        })
        .collect())
}

pub fn normalized_current_attention(snapshot: &AttentionSnapshot, partition: &SequencePartition) -> Result<f64> {
    let rows = normalized_current_attention_rows(snapshot, partition)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// ASI per `(layer, scale)` with its per-scale standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct AsiTable {
    layers: usize,
    scales: usize,
    values: Vec<f64>,
    zscores: Vec<f64>,
    pub per_scale_mean: Vec<f64>,
    pub per_scale_std: Vec<f64>,
    pub epsilon: f64,
    pub top_k: usize,
}

impl AsiTable {
    /// `values` is layer-major: `values[l * scales + k]`. Z-scores are filled in.
    pub fn new(layers: usize, scales: usize, values: Vec<f64>, top_k: usize) -> Result<Self> {
        if values.len() != layers * scales {
            return Err(Error::Shape(format!(
                "{} ASI values for {layers} layers x {scales} scales",
                values.len()
            )));
        }
        let mut t = AsiTable {
            layers,
            scales,
            values,
            zscores: vec![0.0; layers * scales],
            per_scale_mean: vec![0.0; scales],
            per_scale_std: vec![0.0; scales],
            epsilon: EPSILON,
            top_k,
        };
        t.standardize();
        Ok(t)
    }

    /// Recomputes `Z = (ASI - mean_k) / (std_k + eps)` within every scale,
    /// with the population standard deviation across layers.
    pub fn standardize(&mut self) {
        for k in 0..self.scales {
            let col: Vec<f64> = (0..self.layers).map(|l| self.value(l, k)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            let std = var.sqrt();
            self.per_scale_mean[k] = mean;
            self.per_scale_std[k] = std;
            for (l, v) in col.iter().enumerate() {
                self.zscores[l * self.scales + k] = (v - mean) / (std + self.epsilon);
            }
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn value(&self, l: usize, k: usize) -> f64 {
        self.values[l * self.scales + k]
    }

    pub fn z(&self, l: usize, k: usize) -> f64 {
        self.zscores[l * self.scales + k]
    }

    pub fn zscores(&self) -> &[f64] {
        &self.zscores
    }

    /// SHA-256 over the ASI values, hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.layers as u64).to_le_bytes());
        h.update((self.scales as u64).to_le_bytes());
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Drafter/refiner assignment over all `(layer, scale)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RolePlan {
    layers: usize,
    scales: usize,
    /// Drafters in selection order (ascending Z).
    drafters: Vec<(usize, usize)>,
    is_drafter: Vec<bool>,
    zscores: Vec<f64>,
    pub source: String,
}

impl RolePlan {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn n_drafters(&self) -> usize {
        self.drafters.len()
    }

    pub fn drafters(&self) -> &[(usize, usize)] {
        &self.drafters
    }

    pub fn is_drafter(&self, l: usize, k: usize) -> bool {
        self.is_drafter[l * self.scales + k]
    }

    pub fn refiners(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .flat_map(|l| (0..self.scales).map(move |k| (l, k)))
            .filter(|&(l, k)| !self.is_drafter(l, k))
            .collect()
    }

    pub fn z(&self, l: usize, k: usize) -> f64 {
        self.zscores[l * self.scales + k]
    }

    /// Layers at scale `k` with the given role, ascending by Z then layer.
    pub fn layers_at(&self, k: usize, drafter: bool) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.layers).filter(|&l| self.is_drafter(l, k) == drafter).collect();
        v.sort_by(|&a, &b| self.z(a, k).total_cmp(&self.z(b, k)).then(a.cmp(&b)));
        v
    }

    pub fn drafters_per_scale(&self) -> Vec<usize> {
        (0..self.scales)
            .map(|k| (0..self.layers).filter(|&l| self.is_drafter(l, k)).count())
            .collect()
    }

    /// Every pair a refiner, with neutral Z-scores.
    pub fn all_refiners(layers: usize, scales: usize) -> Self {
        RolePlan {
            layers,
            scales,
            drafters: Vec::new(),
            is_drafter: vec![false; layers * scales],
            zscores: vec![0.0; layers * scales],
            source: String::new(),
        }
    }
}

/// Picks the `n_drafters` pairs with the lowest Z-scores. Scale-0 pairs rank
/// after all others; ties break toward the lower layer, then lower scale.
pub fn select_drafters(table: &AsiTable, n_drafters: usize) -> Result<RolePlan> {
    let total = table.layers * table.scales;
    if n_drafters > total {
        return Err(Error::Config(format!(
            "N_d = {n_drafters} exceeds the {total} layer-scale pairs"
        )));
    }
    let mut pairs: Vec<(usize, usize)> = (0..table.layers)
        .flat_map(|l| (0..table.scales).map(move |k| (l, k)))
        .collect();
    pairs.sort_by(|&(la, ka), &(lb, kb)| {
        (ka == 0)
            .cmp(&(kb == 0))
            .then(table.z(la, ka).total_cmp(&table.z(lb, kb)))
            .then(la.cmp(&lb))
            .then(ka.cmp(&kb))
    });
    pairs.truncate(n_drafters);
    let mut is_drafter = vec![false; total];
    for &(l, k) in &pairs {
        is_drafter[l * table.scales + k] = true;
    }
    Ok(RolePlan {
        layers: table.layers,
        scales: table.scales,
        drafters: pairs,
        is_drafter,
        zscores: table.zscores.clone(),
        source: table.digest(),
    })
}

/// Accumulates head-summed ASI per `(layer, scale)` while a generation runs.
#[derive(Debug, Clone)]
pub struct AsiAccumulator {
    layers: usize,
    scales: usize,
    heads: usize,
    top_k: usize,
    sums: Vec<f64>,
    seen: Vec<usize>,
    error: Option<String>,
}

impl AsiAccumulator {
    pub fn new(layers: usize, scales: usize, heads: usize, top_k: usize) -> Self {
        AsiAccumulator {
            layers,
            scales,
            heads,
            top_k,
            sums: vec![0.0; layers * scales],
            seen: vec![0; layers * scales],
            error: None,
        }
    }

    /// Per-`(layer, scale)` ASI averaged over heads, layer-major.
    pub fn finish(self) -> Result<Vec<f64>> {
        if let Some(e) = self.error {
            return Err(Error::Shape(e));
        }
        if let Some(i) = self.seen.iter().position(|&n| n != self.heads) {
            return Err(Error::Sequencing(format!(
                "layer {} scale {} saw {} of {} heads",
                i / self.scales,
                i % self.scales,
                self.seen[i],
                self.heads
            )));
        }
        let h = self.heads as f64;
        Ok(self.sums.into_iter().map(|s| s / h).collect())
    }
}

impl AttentionObserver for AsiAccumulator {
    fn observe(&mut self, s: AttentionSnapshot) {
        if s.layer >= self.layers || s.scale >= self.scales {
            self.error = Some(format!(
                "snapshot (layer {}, scale {}) outside the table",
                s.layer, s.scale
            ));
            return;
        }
        let v = if s.scale == 0 {
            1.0
        } else {
            match asi_head(&s, &s.partition(), self.top_k) {
                Ok(v) => v,
                Err(e) => {
                    self.error = Some(e.to_string());
                    return;
                }
            }
        };
        let i = s.layer * self.scales + s.scale;
        self.sums[i] += v;
        self.seen[i] += 1;
    }
}

/// Runs full-cache generations for every prompt seed, averages ASI across
/// prompts, standardizes per scale and selects `n_drafters` drafters.
pub fn calibrate(
    model: &Model,
    prompt_seeds: &[u64],
    top_k: usize,
    n_drafters: usize,
    schedule: &ScaleSchedule,
) -> Result<(RolePlan, AsiTable)> {
    if prompt_seeds.is_empty() {
        return Err(Error::Config("calibration needs at least one prompt seed".into()));
    }
    if top_k == 0 {
        return Err(Error::Config("K' must be at least 1".into()));
    }
    let cfg = model.config();
    let kk = schedule.num_scales();
    let per_prompt: Vec<Vec<f64>> = prompt_seeds
        .par_iter()
        .map(|&seed| {
            let mut acc = AsiAccumulator::new(cfg.layers, kk, cfg.heads, top_k);
            generate_observed(model, &CachePolicy::Full, schedule, seed, &mut acc)?;
            acc.finish()
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; cfg.layers * kk];
    for run in &per_prompt {
        for (m, v) in mean.iter_mut().zip(run) {
            *m += v;
        }
    }
    let n = per_prompt.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let table = AsiTable::new(cfg.layers, kk, mean, top_k)?;
    let plan = select_drafters(&table, n_drafters)?;
    Ok((plan, table))
}

/// JSON form of a calibration result.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    asi: Vec<(usize, usize, f64)>,
    z: Vec<(usize, usize, f64)>,
    drafters: Vec<(usize, usize)>,
    #[serde(rename = "K_prime")]
    k_prime: usize,
    #[serde(rename = "N_d")]
    n_d: usize,
    epsilon: f64,
}

pub fn calibration_to_json(plan: &RolePlan, table: &AsiTable) -> String {
    let cells = |f: &dyn Fn(usize, usize) -> f64| {
        (0..table.layers)
            .flat_map(|l| (0..table.scales).map(move |k| (l, k)))
            .map(|(l, k)| (l, k, f(l, k)))
            .collect::<Vec<_>>()
    };
    let file = CalibrationFile {
        asi: cells(&|l, k| table.value(l, k)),
        z: cells(&|l, k| table.z(l, k)),
        drafters: plan.drafters.clone(),
        k_prime: table.top_k,
        n_d: plan.n_drafters(),
        epsilon: table.epsilon,
    };
    serde_json::to_string_pretty(&file).expect("calibration serializes")
}

pub fn save_calibration(path: &Path, plan: &RolePlan, table: &AsiTable) -> Result<()> {
    std::fs::write(path, calibration_to_json(plan, table) + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_calibration(path: &Path) -> Result<(RolePlan, AsiTable)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CalibrationFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let bad = |m: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: m,
    };
    let layers = file.asi.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let scales = file.asi.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    let mut asi = BTreeMap::new();
    for &(l, k, v) in &file.asi {
        asi.insert((l, k), v);
    }
    if layers == 0 || asi.len() != layers * scales {
        return Err(bad(format!("asi table does not cover {layers} x {scales} cells")));
    }
    let values: Vec<f64> = asi.values().copied().collect();
    let mut table = AsiTable::new(layers, scales, values, file.k_prime)?;
    table.epsilon = file.epsilon;
    table.standardize();
    if file.z.len() != layers * scales {
        return Err(bad("z table size does not match asi".into()));
    }
    let mut is_drafter = vec![false; layers * scales];
    for &(l, k) in &file.drafters {
        if l >= layers || k >= scales {
            return Err(bad(format!("drafter ({l}, {k}) outside the table")));
        }
        is_drafter[l * scales + k] = true;
    }
    if file.drafters.len() != file.n_d {
        return Err(bad(format!(
            "N_d = {} but {} drafters listed",
            file.n_d,
            file.drafters.len()
        )));
    }
    let plan = RolePlan {
        layers,
        scales,
        drafters: file.drafters,
        is_drafter,
        zscores: table.zscores.clone(),
        source: table.digest(),
    };
    Ok((plan, table))
}
