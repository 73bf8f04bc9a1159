use std::collections::BTreeMap;
use std::path::Path;

use crate::analysis::{normalized_current_attention_rows, AsiAccumulator, AsiTable};
use crate::error::{Error, Result};
use crate::model::{AttentionObserver, AttentionSnapshot};

/// Head-averaged normalized current attention, one sample per query row.
#[derive(Debug, Clone, PartialEq)]
pub struct NcaSamples {
    pub layer: usize,
    pub scale: usize,
    pub values: Vec<f64>,
}

/// Groups snapshots by `(layer, scale)` and averages each query row's
/// normalized current attention over heads.
pub fn nca_samples(snapshots: &[AttentionSnapshot]) -> Result<Vec<NcaSamples>> {
    let mut groups: BTreeMap<(usize, usize), Vec<&AttentionSnapshot>> = BTreeMap::new();
    for s in snapshots {
        groups.entry((s.layer, s.scale)).or_default().push(s);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((layer, scale), heads) in groups {
        let mut acc = vec![0.0; heads[0].rows];
        for s in &heads {
            if s.rows != acc.len() {
                return Err(Error::Shape(format!(
                    "layer {layer} scale {scale}: heads disagree on row count"
                )));
            }
            for (a, v) in acc
                .iter_mut()
                .zip(normalized_current_attention_rows(s, &s.partition())?)
            {
                *a += v;
            }
        }
        let h = heads.len() as f64;
        acc.iter_mut().for_each(|a| *a /= h);
        out.push(NcaSamples {
            layer,
            scale,
            values: acc,
        });
    }
    Ok(out)
}

/// Zero-based scale indices of the small and large comparison groups:
/// scales 1..=3 and the three scales before the last, kept disjoint.
pub fn scale_groups(scales: usize) -> (Vec<usize>, Vec<usize>) {
    let small: Vec<usize> = (1..=3).filter(|&k| k < scales).collect();
    let first_large = scales.saturating_sub(4).max(4);
    let large: Vec<usize> = (first_large..scales.saturating_sub(1)).collect();
    (small, large)
}

/// ASI table rebuilt from dumped snapshots.
pub fn asi_from_snapshots(
    snapshots: &[AttentionSnapshot],
    layers: usize,
    scales: usize,
    heads: usize,
    top_k: usize,
) -> Result<AsiTable> {
    let mut acc = AsiAccumulator::new(layers, scales, heads, top_k);
    for s in snapshots {
        acc.observe(s.clone());
    }
    AsiTable::new(layers, scales, acc.finish()?, top_k)
}

pub(crate) fn write_samples(
    path: &Path,
    samples: &[NcaSamples],
    layer: Option<usize>,
    scale: Option<usize>,
) -> Result<usize> {
    let mut text = String::from("layer,scale,query,nca\n");
    let mut n = 0;
    for s in samples {
        if layer.is_some_and(|l| l != s.layer) || scale.is_some_and(|k| k != s.scale) {
            continue;
        }
        for (i, v) in s.values.iter().enumerate() {
            text.push_str(&format!("{},{},{i},{v}\n", s.layer, s.scale));
            n += 1;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(n)
}

pub(crate) fn write_groups(path: &Path, samples: &[NcaSamples], scales: usize) -> Result<(usize, usize)> {
    let (small, large) = scale_groups(scales);
    let pick = |set: &[usize]| -> Vec<f64> {
        samples
            .iter()
            .filter(|s| set.contains(&s.scale))
            .flat_map(|s| s.values.iter().copied())
            .collect()
    };
    let (a, b) = (pick(&small), pick(&large));
    let mut text = String::from("small,large\n");
    for i in 0..a.len().max(b.len()) {
        let cell = |v: &[f64]| v.get(i).map(|x| x.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{}\n", cell(&a), cell(&b)));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok((a.len(), b.len()))
}

pub(crate) fn write_asi(path: &Path, table: &AsiTable) -> Result<()> {
    let mut text = String::from("layer,scale,asi,z\n");
    for l in 0..table.layers() {
        for k in 0..table.scales() {
            text.push_str(&format!("{l},{k},{},{}\n", table.value(l, k), table.z(l, k)));
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_for_thirteen_scales() {
        assert_eq!(scale_groups(13), (vec![1, 2, 3], vec![9, 10, 11]));
        assert_eq!(scale_groups(6), (vec![1, 2, 3], vec![4]));
        assert_eq!(scale_groups(2), (vec![1], vec![]));
    }
}
