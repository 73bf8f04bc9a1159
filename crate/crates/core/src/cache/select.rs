//! Importance scoring from observation-window queries and top-k retention.

use crate::error::{Error, Result};
use crate::model::ops::{dot, softmax_in_place};

/// Head-averaged importance of every candidate token for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    /// Scale whose observation window produced the scores.
    pub scale: usize,
    /// Absolute indices of the window tokens.
    pub window: Vec<usize>,
    /// Absolute indices of the candidates, ascending.
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Cumulative attention each candidate key receives from the window queries.
///
/// `queries` is `|W| x (heads * d_k)` and `keys` is `candidates x (heads * d_k)`.
/// Each head's rows are `softmax(q k^T / sqrt(d_k))` over all candidates;
/// per-head column sums are then averaged across heads.
pub fn importance_scores(queries: &[f32], keys: &[f32], heads: usize, d_k: usize) -> Result<Vec<f64>> {
    let width = heads * d_k;
    if width == 0 || !queries.len().is_multiple_of(width) || !keys.len().is_multiple_of(width) {
        return Err(Error::Shape(format!(
            "queries ({}) and keys ({}) must be multiples of heads*d_k = {width}",
            queries.len(),
            keys.len()
        )));
    }
    let n_keys = keys.len() / width;
    let inv_sqrt = 1.0 / (d_k as f32).sqrt();
    let mut scores = vec![0.0f64; n_keys];
    let mut row = vec![0.0f32; n_keys];
    for head in 0..heads {
        let hs = head * d_k..(head + 1) * d_k;
        for q in queries.chunks_exact(width) {
            let qh = &q[hs.clone()];
            for (r, k) in row.iter_mut().zip(keys.chunks_exact(width)) {
                *r = dot(qh, &k[hs.clone()]) * inv_sqrt;
            }
            softmax_in_place(&mut row);
            for (s, &a) in scores.iter_mut().zip(&row) {
                *s += a as f64;
            }
        }
    }
    let inv_heads = 1.0 / heads as f64;
    scores.iter_mut().for_each(|s| *s *= inv_heads);
    Ok(scores)
}

/// Retained set: every window token among the candidates, plus the
/// highest-scoring remaining candidates until `budget` tokens are kept.
///
/// Ties go to the lower absolute index. A budget at or above the candidate
/// count keeps everything. Output is ascending.
pub fn select_retained(scores: &ImportanceScores, budget: usize, window: &[usize]) -> Vec<usize> {
    let cands = &scores.candidates;
    if budget >= cands.len() {
        return cands.clone();
    }
    let mut sorted_window = window.to_vec();
    sorted_window.sort_unstable();
    let in_window = |p: &usize| sorted_window.binary_search(p).is_ok();
    let mut keep: Vec<usize> = cands.iter().copied().filter(in_window).collect();
    let slots = budget.saturating_sub(keep.len());

    let mut ranked: Vec<(usize, f64)> = cands
        .iter()
        .zip(&scores.scores)
        .filter(|(p, _)| !in_window(p))
        .map(|(&p, &s)| (p, s))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    keep.extend(ranked.into_iter().take(slots).map(|(p, _)| p));
    keep.sort_unstable();
    keep
}

/// Most recent `tokens` positions.
pub fn sliding_window(positions: &[usize], tokens: usize) -> Vec<usize> {
    positions[positions.len().saturating_sub(tokens)..].to_vec()
}

/// First `sinks` positions plus the most recent `recent`.
pub fn sinks_and_recent(positions: &[usize], sinks: usize, recent: usize) -> Vec<usize> {
    if sinks + recent >= positions.len() {
        return positions.to_vec();
    }
    let mut out = positions[..sinks].to_vec();
    out.extend_from_slice(&positions[positions.len() - recent..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(scores: Vec<f64>) -> ImportanceScores {
        ImportanceScores {
            scale: 0,
            window: vec![],
            candidates: (0..scores.len()).collect(),
            scores,
        }
    }

    #[test]
    fn uniform_single_query() {
        // Zero queries make every logit equal.
        let q = vec![0.0f32; 4];
        let k: Vec<f32> = (0..5 * 4).map(|i| i as f32).collect();
        let s = importance_scores(&q, &k, 1, 4).unwrap();
        for v in s {
            assert!((v - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn delta_rows() {
        // Two window rows that put all mass on candidate 0.
        let q = vec![100.0f32, 100.0];
        let k = vec![1.0f32, 0.0, 0.0];
        let s = importance_scores(&q, &k, 1, 1).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-9);
        assert!(s[1].abs() < 1e-9 && s[2].abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            importance_scores(&[0.0; 3], &[0.0; 4], 2, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn low_index_tie_break() {
        assert_eq!(select_retained(&scored(vec![0.5, 0.5, 0.1]), 2, &[]), vec![0, 1]);
    }

    #[test]
    fn budget_above_candidates_keeps_all() {
        assert_eq!(select_retained(&scored(vec![0.1, 0.2]), 5, &[]), vec![0, 1]);
    }

    #[test]
    fn window_always_kept() {
        let s = scored(vec![0.9, 0.8, 0.7, 0.0, 0.0]);
        assert_eq!(select_retained(&s, 3, &[3, 4]), vec![0, 3, 4]);
        // window alone can exceed a too-small budget
        assert_eq!(select_retained(&s, 1, &[3, 4]), vec![3, 4]);
    }

    #[test]
    fn baselines() {
        let p: Vec<usize> = (0..10).collect();
        assert_eq!(sinks_and_recent(&p, 1, 3), vec![0, 7, 8, 9]);
        assert_eq!(sliding_window(&p, 4), vec![6, 7, 8, 9]);
        assert_eq!(sliding_window(&p, 40), p);
    }
}
