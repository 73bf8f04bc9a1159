use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cache contents as seen by each scale, for golden files and reconciliation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheAudit {
    pub policy: String,
    /// `2 * heads * d_k * bytes_per_element`.
    pub bytes_per_token: u64,
    pub steps: Vec<AuditStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditStep {
    pub scale: usize,
    pub bytes: u64,
    pub layers: Vec<LayerAudit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerAudit {
    pub layer: usize,
    /// Effective history budget in force at this step; `null` when unbounded.
    pub budget: Option<usize>,
    pub retained: Vec<usize>,
}

impl AuditStep {
    pub fn retained_tokens(&self) -> usize {
        self.layers.iter().map(|l| l.retained.len()).sum()
    }
}

impl CacheAudit {
    pub fn peak_bytes(&self) -> u64 {
        self.steps.iter().map(|s| s.bytes).max().unwrap_or(0)
    }

    /// Bytes and tokens held when the last scale runs.
    pub fn end_bytes(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.bytes)
    }

    pub fn end_retained_tokens(&self) -> usize {
        self.steps.last().map_or(0, |s| s.retained_tokens())
    }

    /// Every budget-compliance and byte-accounting problem found, as text.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for step in &self.steps {
            for la in &step.layers {
                if let Some(b) = la.budget {
                    if la.retained.len() > b {
                        out.push(format!(
                            "{}: scale {} layer {} retains {} > budget {b}",
                            self.policy,
                            step.scale,
                            la.layer,
                            la.retained.len()
                        ));
                    }
                }
                if la.retained.windows(2).any(|w| w[0] >= w[1]) {
                    out.push(format!(
                        "{}: scale {} layer {} retained indices not strictly ascending",
                        self.policy, step.scale, la.layer
                    ));
                }
            }
            let expect = step.retained_tokens() as u64 * self.bytes_per_token;
            if step.bytes != expect {
                out.push(format!(
                    "{}: scale {} reports {} bytes, retained tokens imply {expect}",
                    self.policy, step.scale, step.bytes
                ));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
