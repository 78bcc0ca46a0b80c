//! Activation profiles: per-layer token-expert count matrices, routed
//! request traces and token embeddings.

mod embedding;
mod ingest;
mod synth;

pub use embedding::EmbeddingTable;
pub use ingest::{ingest_profile, ingest_reader, write_trace, Profile, TraceRecord};
pub use synth::{synthesize_planted_profile, PlantedConfig, PlantedProfile};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{Error, Result};

/// Activation counts of one MoE layer: `counts[j * N + k]` is how often the
/// `j`-th profiled token was routed to expert `k`.
///
/// Rows exist only for tokens seen in the profile; `token_ids` is strictly
/// increasing and maps row index to token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenExpertMatrix {
    pub layer: usize,
    pub n_experts: usize,
    pub token_ids: Vec<u32>,
    pub counts: Vec<u32>,
    /// Token frequency `a[j]`, the row sum.
    pub freq: Vec<u64>,
    /// Un-deduplicated token count `S = sum(a)`.
    pub total: u64,
}

impl TokenExpertMatrix {
    pub fn empty(layer: usize, n_experts: usize) -> Self {
        Self {
            layer,
            n_experts,
            token_ids: Vec::new(),
            counts: Vec::new(),
            freq: Vec::new(),
            total: 0,
        }
    }

    /// Builds a matrix from `(token id, row)` pairs in any order. Token ids
    /// must be distinct.
    pub fn from_rows(
        layer: usize,
        n_experts: usize,
        rows: impl IntoIterator<Item = (u32, Vec<u32>)>,
    ) -> Result<Self> {
        let mut sorted: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (tok, row) in rows {
            if row.len() != n_experts {
                return Err(Error::DimensionMismatch(format!(
                    "row for token {tok} has {} entries, expected {n_experts}",
                    row.len()
                )));
            }
            if sorted.insert(tok, row).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate row for token {tok}")));
            }
        }
        let mut m = Self::empty(layer, n_experts);
        for (tok, row) in sorted {
            let a: u64 = row.iter().map(|&c| c as u64).sum();
            m.token_ids.push(tok);
            m.counts.extend_from_slice(&row);
            m.freq.push(a);
            m.total += a;
        }
        Ok(m)
    }

    /// Checked construction from signed counts (e.g. user-edited data).
    /// Negative or oversized entries are reported with their `(j, k)` index.
    pub fn try_from_signed(
        layer: usize,
        n_experts: usize,
        token_ids: &[u32],
        rows: &[Vec<i64>],
    ) -> std::result::Result<Self, ValidationReport> {
        let mut report = ValidationReport::default();
        if token_ids.len() != rows.len() {
            report.violations.push(Violation::Shape(format!(
                "{} token ids for {} rows",
                token_ids.len(),
                rows.len()
            )));
            return Err(report);
        }
        for (j, row) in rows.iter().enumerate() {
            if row.len() != n_experts {
                report.violations.push(Violation::Shape(format!(
                    "row {j} has {} entries, expected {n_experts}",
                    row.len()
                )));
                continue;
            }
            for (k, &c) in row.iter().enumerate() {
                if c < 0 {
                    report.violations.push(Violation::NegativeCount { row: j, expert: k, value: c });
                } else if c > u32::MAX as i64 {
                    report.violations.push(Violation::CountOverflow { row: j, expert: k });
                }
            }
        }
        if !report.is_valid() {
            return Err(report);
        }
        let rows = token_ids
            .iter()
            .zip(rows)
            .map(|(&t, r)| (t, r.iter().map(|&c| c as u32).collect()));
        Self::from_rows(layer, n_experts, rows).map_err(|e| ValidationReport {
            violations: vec![Violation::Shape(e.to_string())],
            unseen_rows: Vec::new(),
        })
    }

    /// Number of distinct profiled tokens, `t`.
    pub fn n_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn row(&self, j: usize) -> &[u32] {
        &self.counts[j * self.n_experts..(j + 1) * self.n_experts]
    }

    pub fn get(&self, j: usize, k: usize) -> u32 {
        self.counts[j * self.n_experts + k]
    }

    pub fn row_of(&self, token: u32) -> Option<usize> {
        self.token_ids.binary_search(&token).ok()
    }

    /// Per-expert activation totals.
    pub fn column_sums(&self) -> Vec<u64> {
        let mut sums = vec![0u64; self.n_experts];
        for row in self.counts.chunks_exact(self.n_experts.max(1)) {
            for (s, &c) in sums.iter_mut().zip(row) {
                *s += c as u64;
            }
        }
        sums
    }

    pub fn max_freq(&self) -> u64 {
        self.freq.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let t = self.token_ids.len();
        if self.counts.len() != t * self.n_experts {
            report.violations.push(Violation::Shape(format!(
                "{} counts for {t} tokens x {} experts",
                self.counts.len(),
                self.n_experts
            )));
            return report;
        }
        if self.freq.len() != t {
            report.violations.push(Violation::Shape(format!(
                "{} frequencies for {t} tokens",
                self.freq.len()
            )));
            return report;
        }
        for j in 1..t {
            if self.token_ids[j] <= self.token_ids[j - 1] {
                report.violations.push(Violation::UnsortedTokens { row: j });
            }
        }
        let mut actual_total = 0u64;
        for j in 0..t {
            let sum: u64 = self.row(j).iter().map(|&c| c as u64).sum();
            if sum != self.freq[j] {
                report.violations.push(Violation::FrequencyMismatch {
                    row: j,
                    stored: self.freq[j],
                    actual: sum,
                });
            }
            if sum == 0 {
                report.unseen_rows.push(j);
            }
            actual_total += self.freq[j];
        }
        if actual_total != self.total {
            report.violations.push(Violation::TotalMismatch {
                stored: self.total,
                actual: actual_total,
            });
        }
        report
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NegativeCount { row: usize, expert: usize, value: i64 },
    CountOverflow { row: usize, expert: usize },
    FrequencyMismatch { row: usize, stored: u64, actual: u64 },
    TotalMismatch { stored: u64, actual: u64 },
    UnsortedTokens { row: usize },
    Shape(String),
}

/// Outcome of [`TokenExpertMatrix::validate`]. Unseen rows (zero frequency)
/// are flagged but are not violations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub unseen_rows: Vec<usize>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// One request: its token sequence and, when routed, the gate output for
/// every (position, layer) as `k` expert ids in gate-rank order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: u64,
    pub tokens: Vec<u32>,
    /// Flattened `[pos][layer][rank]`; empty when the request is unrouted.
    pub routes: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestTrace {
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub vocab: usize,
    pub requests: Vec<Request>,
}

impl RequestTrace {
    pub fn new(n_layers: usize, n_experts: usize, top_k: usize, vocab: usize) -> Self {
        Self {
            n_layers,
            n_experts,
            top_k,
            vocab,
            requests: Vec::new(),
        }
    }

    /// True when every request carries a full routing record.
    pub fn is_routed(&self) -> bool {
        self.requests
            .iter()
            .all(|r| r.routes.len() == r.tokens.len() * self.n_layers * self.top_k)
    }

    /// Experts selected for `request.tokens[pos]` at `layer`, in gate-rank order.
    pub fn experts<'r>(&self, request: &'r Request, pos: usize, layer: usize) -> &'r [u16] {
        let start = (pos * self.n_layers + layer) * self.top_k;
        &request.routes[start..start + self.top_k]
    }

    pub fn total_tokens(&self) -> usize {
        self.requests.iter().map(|r| r.tokens.len()).sum()
    }

    /// Structural check of token ranges and routed sets.
    pub fn validate(&self) -> Result<()> {
        for req in &self.requests {
            if let Some(&tok) = req.tokens.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(Error::InvalidConfig(format!(
                    "request {}: token {tok} outside vocabulary {}",
                    req.id, self.vocab
                )));
            }
            if req.routes.is_empty() {
                continue;
            }
            if req.routes.len() != req.tokens.len() * self.n_layers * self.top_k {
                return Err(Error::DimensionMismatch(format!(
                    "request {} has {} routed entries",
                    req.id,
                    req.routes.len()
                )));
            }
            for set in req.routes.chunks_exact(self.top_k) {
                for (i, &e) in set.iter().enumerate() {
                    if e as usize >= self.n_experts || set[..i].contains(&e) {
                        return Err(Error::InvalidConfig(format!(
                            "request {}: routed set {set:?} is not {} distinct experts in [0, {})",
                            req.id, self.top_k, self.n_experts
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-layer count matrices aggregated over all routed occurrences.
    pub fn layer_matrices(&self) -> Result<Vec<TokenExpertMatrix>> {
        if !self.is_routed() {
            return Err(Error::MissingRouting);
        }
        let mut builders: Vec<MatrixBuilder> = (0..self.n_layers)
            .map(|l| MatrixBuilder::new(l, self.n_experts))
            .collect();
        for req in &self.requests {
            for (pos, &tok) in req.tokens.iter().enumerate() {
                for (layer, b) in builders.iter_mut().enumerate() {
                    for &e in self.experts(req, pos, layer) {
                        b.add(tok, e as usize)?;
                    }
                }
            }
        }
        Ok(builders.into_iter().map(MatrixBuilder::finish).collect())
    }

    /// Keeps the requests at `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> RequestTrace {
        RequestTrace {
            requests: indices.iter().map(|&i| self.requests[i].clone()).collect(),
            ..*self
        }
    }

    /// Splits by request into (train, holdout). A seeded shuffle picks
    /// `round(fraction * R)` training requests; both halves keep the
    /// original request order.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(RequestTrace, RequestTrace)> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split fraction {fraction} outside (0, 1]"
            )));
        }
        let n = self.requests.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((fraction * n as f64).round() as usize).min(n);
        let mut train = idx[..n_train].to_vec();
        let mut hold = idx[n_train..].to_vec();
        train.sort_unstable();
        hold.sort_unstable();
        Ok((self.subset(&train), self.subset(&hold)))
    }
}

/// Accumulates (token, expert) events into a [`TokenExpertMatrix`].
#[derive(Debug, Clone)]
pub struct MatrixBuilder {
    layer: usize,
    n_experts: usize,
    rows: BTreeMap<u32, Vec<u32>>,
}

impl MatrixBuilder {
    pub fn new(layer: usize, n_experts: usize) -> Self {
        Self {
            layer,
            n_experts,
            rows: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, token: u32, expert: usize) -> Result<()> {
        self.add_count(token, expert, 1)
    }

    pub fn add_count(&mut self, token: u32, expert: usize, count: u32) -> Result<()> {
        let n = self.n_experts;
        let row = self.rows.entry(token).or_insert_with(|| vec![0; n]);
        row[expert] = row[expert].checked_add(count).ok_or(Error::CountOverflow {
            layer: self.layer,
            token,
            expert,
        })?;
        Ok(())
    }

    pub fn finish(self) -> TokenExpertMatrix {
        TokenExpertMatrix::from_rows(self.layer, self.n_experts, self.rows)
            .expect("builder rows are distinct and sized")
    }
}
