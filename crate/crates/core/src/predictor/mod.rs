//! Routing-path prediction from activation profiles.
//!
//! Intra-layer prediction uses the token's empirical expert distribution;
//! inter-layer prediction uses an n-gram over the devices a token visited at
//! the previous layers.

mod confidence;
mod evaluate;
mod ngram;
mod oov;

pub use confidence::{build_confidence_table, token_table_for_layout, TokenExpertConfidence};
pub use evaluate::{activation_kurtosis, evaluate_predictor, KurtosisSummary, PredictorReport};
pub use ngram::{build_ngram_table, DeviceNGramTable};
pub use oov::extrapolate_oov;

use serde::{Deserialize, Serialize};

use crate::{ClusterId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Profiled,
    Extrapolated,
    Fallback,
}

/// Vocabulary-wide token-to-cluster table with per-token confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDeviceTable {
    pub n_clusters: usize,
    pub labels: Vec<ClusterId>,
    pub confidence: Vec<f32>,
    pub provenance: Vec<Provenance>,
}

impl TokenDeviceTable {
    /// Every token starts as fallback: label `token mod E`, confidence `1/E`.
    pub fn fallback(vocab: usize, n_clusters: usize) -> Self {
        let e = n_clusters.max(1);
        Self {
            n_clusters: e,
            labels: (0..vocab).map(|t| (t % e) as ClusterId).collect(),
            confidence: vec![1.0 / e as f32; vocab],
            provenance: vec![Provenance::Fallback; vocab],
        }
    }

    /// Fallback table with the given profiled entries written in.
    pub fn from_profiled(
        vocab: usize,
        n_clusters: usize,
        entries: impl IntoIterator<Item = (u32, ClusterId, f32)>,
    ) -> Result<Self> {
        let mut table = Self::fallback(vocab, n_clusters);
        for (tok, label, conf) in entries {
            let t = tok as usize;
            if t >= vocab {
                return Err(Error::DimensionMismatch(format!(
                    "token {tok} outside vocabulary {vocab}"
                )));
            }
            if label as usize >= n_clusters {
                return Err(Error::InvalidConfig(format!(
                    "label {label} for token {tok} outside [0, {n_clusters})"
                )));
            }
            table.labels[t] = label;
            table.confidence[t] = conf.clamp(0.0, 1.0);
            table.provenance[t] = Provenance::Profiled;
        }
        Ok(table)
    }

    pub fn vocab(&self) -> usize {
        self.labels.len()
    }

    pub fn profiled_tokens(&self) -> Vec<u32> {
        self.provenance
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == Provenance::Profiled)
            .map(|(t, _)| t as u32)
            .collect()
    }
}
