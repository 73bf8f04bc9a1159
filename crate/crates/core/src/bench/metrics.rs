//! Divergence of a compressed-cache generation from the full-cache one.

use crate::error::{Error, Result};
use crate::model::GenerationTrace;

/// Mean squared difference of two logit buffers.
pub fn logit_mse(reference: &[f32], other: &[f32]) -> Result<f64> {
    if reference.len() != other.len() || reference.is_empty() {
        return Err(Error::Shape(format!(
            "logit buffers have {} and {} entries",
            reference.len(),
            other.len()
        )));
    }
    let sum: f64 = reference
        .iter()
        .zip(other)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / reference.len() as f64)
}

/// Fraction of positions holding the same token.
pub fn token_agreement(reference: &[u32], other: &[u32]) -> Result<f64> {
    if reference.len() != other.len() || reference.is_empty() {
        return Err(Error::Shape(format!(
            "token maps have {} and {} entries",
            reference.len(),
            other.len()
        )));
    }
    let same = reference.iter().zip(other).filter(|(a, b)| a == b).count();
    Ok(same as f64 / reference.len() as f64)
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Mean over rows of `KL(softmax(p) || softmax(q))`, rows of `vocab` logits.
pub fn mean_kl(p_logits: &[f32], q_logits: &[f32], vocab: usize) -> Result<f64> {
    if vocab == 0 || p_logits.len() != q_logits.len() || p_logits.is_empty() || !p_logits.len().is_multiple_of(vocab) {
        return Err(Error::Shape(format!(
            "cannot compare {} and {} logits with vocab {vocab}",
            p_logits.len(),
            q_logits.len()
        )));
    }
    let rows = p_logits.len() / vocab;
    let mut total = 0.0;
    for (p, q) in p_logits.chunks_exact(vocab).zip(q_logits.chunks_exact(vocab)) {
        let lp = log_softmax(p);
        let lq = log_softmax(q);
        total += lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0);
    }
    Ok(total / rows as f64)
}

/// The three divergence figures of one bench row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    /// Over the final scale's logits.
    pub logit_mse: f64,
    /// Over the final token map.
    pub token_agreement: f64,
    /// Per-scale mean KL, averaged over scales.
    pub mean_kl: f64,
}

pub fn divergence(reference: &GenerationTrace, other: &GenerationTrace) -> Result<Divergence> {
    let kk = reference.scale_logits.len();
    if kk == 0 || other.scale_logits.len() != kk || reference.vocab != other.vocab {
        return Err(Error::Shape("traces cover different schedules".into()));
    }
    let last = |t: &GenerationTrace| t.token_maps.last().map(|m| m.tokens.clone()).unwrap_or_default();
    let mut kl = 0.0;
    for (p, q) in reference.scale_logits.iter().zip(&other.scale_logits) {
        kl += mean_kl(p, q, reference.vocab)?;
    }
    Ok(Divergence {
        logit_mse: logit_mse(reference.final_logits(), other.final_logits())?,
        token_agreement: token_agreement(&last(reference), &last(other))?,
        mean_kl: kl / kk as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs() {
        let a = [0.5f32, -1.0, 2.0, 0.0];
        assert_eq!(logit_mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mean_kl(&a, &a, 2).unwrap(), 0.0);
        assert_eq!(token_agreement(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    }

    #[test]
    fn hand_values() {
        assert_eq!(logit_mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(token_agreement(&[1, 2, 3, 4], &[1, 0, 3, 0]).unwrap(), 0.5);
        // KL([1/2, 1/2] || [e/(1+e), 1/(1+e)])
        let q1 = 1.0f64.exp() / (1.0 + 1.0f64.exp());
        let want = 0.5 * (0.5 / q1).ln() + 0.5 * (0.5 / (1.0 - q1)).ln();
        assert!((mean_kl(&[0.0, 0.0], &[1.0, 0.0], 2).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        assert!(logit_mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mean_kl(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2).is_err());
        assert!(token_agreement(&[], &[]).is_err());
    }
}
