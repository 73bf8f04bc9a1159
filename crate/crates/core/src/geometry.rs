//! Multi-scale token layout.
//!
//! A [`ScaleSchedule`] lists the `(rows, cols)` of each token map in
//! generation order. Scale indices are zero-based throughout the crate;
//! human-facing summaries print them one-based as `r_1..r_K`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest scale count accepted by [`ScaleSchedule`].
pub const MAX_SCALES: usize = 16;
/// Largest single token map accepted by [`ScaleSchedule`].
pub const MAX_MAP_TOKENS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    scales: Vec<(usize, usize)>,
    /// `offsets[k]` is the number of tokens in scales `0..k`; `offsets[K]` is the total.
    offsets: Vec<usize>,
}

/// Split of the sequence seen while generating one scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePartition {
    pub scale_index: usize,
    pub history: Range<usize>,
    pub current: Range<usize>,
}

impl SequencePartition {
    /// Partition with `history` tokens followed by `current` tokens.
    pub fn from_lengths(scale_index: usize, history: usize, current: usize) -> Self {
        SequencePartition {
            scale_index,
            history: 0..history,
            current: history..history + current,
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn current_len(&self) -> usize {
        self.current.len()
    }

    pub fn total_len(&self) -> usize {
        self.history.len() + self.current.len()
    }
}

/// Serialized form of a schedule inside the run config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ScheduleSpec {
    Preset {
        preset: SchedulePreset,
        #[serde(rename = "K")]
        scales: usize,
    },
    Explicit {
        explicit: Vec<(usize, usize)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulePreset {
    /// `h_k = w_k = k` for one-based `k`.
    #[serde(rename = "square-linear")]
    SquareLinear,
}

impl ScheduleSpec {
    pub fn square_linear(scales: usize) -> Self {
        ScheduleSpec::Preset {
            preset: SchedulePreset::SquareLinear,
            scales,
        }
    }

    pub fn build(&self) -> Result<ScaleSchedule> {
        match self {
            ScheduleSpec::Preset {
                preset: SchedulePreset::SquareLinear,
                scales,
            } => ScaleSchedule::square_linear(*scales),
            ScheduleSpec::Explicit { explicit } => ScaleSchedule::from_explicit(explicit.clone()),
        }
    }
}

impl ScaleSchedule {
    /// `h_k = w_k = k` for `k = 1..=scales`.
    pub fn square_linear(scales: usize) -> Result<Self> {
        if scales == 0 {
            return Err(Error::Schedule("scale count must be at least 1".into()));
        }
        Self::from_explicit((1..=scales).map(|k| (k, k)).collect())
    }

    pub fn from_explicit(scales: Vec<(usize, usize)>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Schedule("scale count must be at least 1".into()));
        }
        if scales.len() > MAX_SCALES {
            return Err(Error::Schedule(format!(
                "{} scales exceeds the limit of {MAX_SCALES}",
                scales.len()
            )));
        }
        let mut offsets = Vec::with_capacity(scales.len() + 1);
        offsets.push(0usize);
        let mut prev = 0usize;
        for (i, &(h, w)) in scales.iter().enumerate() {
            if h == 0 || w == 0 {
                return Err(Error::Schedule(format!(
                    "scale r_{} has an empty side ({h}x{w})",
                    i + 1
                )));
            }
            let n = h.checked_mul(w).filter(|&n| n <= MAX_MAP_TOKENS).ok_or_else(|| {
                Error::Schedule(format!("scale r_{} ({h}x{w}) exceeds {MAX_MAP_TOKENS} tokens", i + 1))
            })?;
            if n < prev {
                return Err(Error::Schedule(format!(
                    "token counts must be non-decreasing: r_{} has {n} < {prev}",
                    i + 1
                )));
            }
            prev = n;
            offsets.push(offsets[i] + n);
        }
        Ok(ScaleSchedule { scales, offsets })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn dims(&self, k: usize) -> (usize, usize) {
        self.scales[k]
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    pub fn tokens_in(&self, k: usize) -> usize {
        let (h, w) = self.scales[k];
        h * w
    }

    pub fn total_tokens(&self) -> usize {
        self.offsets[self.scales.len()]
    }

    /// Tokens generated before scale `k`.
    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    /// History length at scale `k` when `prefix` conditioning tokens precede the maps.
    pub fn history_len(&self, k: usize, prefix: usize) -> usize {
        prefix + self.offsets[k]
    }

    pub fn partition(&self, k: usize) -> Result<SequencePartition> {
        self.partition_with_prefix(k, 0)
    }

    /// Partition of `prefix` conditioning tokens plus scales `0..=k`.
    pub fn partition_with_prefix(&self, k: usize, prefix: usize) -> Result<SequencePartition> {
        if k >= self.scales.len() {
            return Err(Error::Index {
                what: "scale",
                index: k,
                len: self.scales.len(),
            });
        }
        Ok(SequencePartition::from_lengths(
            k,
            self.history_len(k, prefix),
            self.tokens_in(k),
        ))
    }

    pub fn to_spec(&self) -> ScheduleSpec {
        let k = self.scales.len();
        if self.scales.iter().enumerate().all(|(i, &d)| d == (i + 1, i + 1)) {
            ScheduleSpec::square_linear(k)
        } else {
            ScheduleSpec::Explicit {
                explicit: self.scales.clone(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_linear_four_scales() {
        let s = ScaleSchedule::square_linear(4).unwrap();
        assert_eq!(s.scales(), &[(1, 1), (2, 2), (3, 3), (4, 4)]);
        assert_eq!(s.total_tokens(), 30);
    }

    #[test]
    fn single_scale() {
        assert_eq!(ScaleSchedule::square_linear(1).unwrap().total_tokens(), 1);
    }

    #[test]
    fn zero_scales_rejected() {
        assert!(matches!(ScaleSchedule::square_linear(0), Err(Error::Schedule(_))));
    }

    #[test]
    fn non_monotone_explicit_rejected() {
        let err = ScaleSchedule::from_explicit(vec![(2, 2), (1, 3)]).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)));
        // equal counts with a different aspect are fine
        ScaleSchedule::from_explicit(vec![(1, 4), (2, 2)]).unwrap();
    }

    #[test]
    fn limits() {
        assert!(ScaleSchedule::square_linear(17).is_err());
        assert!(ScaleSchedule::from_explicit(vec![(64, 65)]).is_err());
        let s = ScaleSchedule::square_linear(16).unwrap();
        assert_eq!(s.total_tokens(), 16 * 17 * 33 / 6);
        // the largest admissible schedule stays far from overflow
        let big = ScaleSchedule::from_explicit(vec![(64, 64); 16]).unwrap();
        assert_eq!(big.total_tokens(), 16 * 4096);
    }

    #[test]
    fn partitions() {
        let s = ScaleSchedule::square_linear(4).unwrap();
        let p = s.partition(2).unwrap();
        assert_eq!((p.history_len(), p.current_len()), (5, 9));
        assert_eq!(p.history.end, p.current.start);
        assert_eq!(s.partition(0).unwrap().history_len(), 0);
        let p = s.partition(3).unwrap();
        assert_eq!((p.history_len(), p.current_len()), (14, 16));
        assert!(matches!(s.partition(4), Err(Error::Index { .. })));
    }

    #[test]
    fn prefix_shifts_history() {
        let s = ScaleSchedule::square_linear(3).unwrap();
        let p = s.partition_with_prefix(1, 16).unwrap();
        assert_eq!(p.history, 0..17);
        assert_eq!(p.current, 17..21);
    }

    #[test]
    fn spec_json_forms() {
        let preset: ScheduleSpec = serde_json::from_str(r#"{"preset":"square-linear","K":5}"#).unwrap();
        assert_eq!(preset.build().unwrap().total_tokens(), 55);
        let explicit: ScheduleSpec = serde_json::from_str(r#"{"explicit":[[1,1],[2,3]]}"#).unwrap();
        assert_eq!(explicit.build().unwrap().total_tokens(), 7);
        assert_eq!(
            serde_json::to_string(&ScaleSchedule::square_linear(3).unwrap().to_spec()).unwrap(),
            r#"{"preset":"square-linear","K":3}"#
        );
        assert!(serde_json::from_str::<ScheduleSpec>(r#"{"preset":"cubic","K":5}"#).is_err());
    }
}
